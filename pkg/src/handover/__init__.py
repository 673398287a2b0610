"""Desk-scale bimanual throw-and-catch training: simulator, MAPPO/PPO, goal estimator, pipeline."""

__version__ = "0.1.0"
