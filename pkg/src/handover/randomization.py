"""Domain randomization: per-instance parameter draws and their application to an EnvConfig.

Ranges follow the standard randomization table used for the throw-and-catch task. Scaling
rows multiply the corresponding config value, additive rows add to it. The log-uniform rows
whose nominal range starts at zero are floored at ``LOGUNIFORM_FLOOR``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from handover.config import EnvConfig
from handover.errors import ConfigError

LOGUNIFORM_FLOOR = 1e-6

ROBOT_MASS_RANGE = (0.5, 1.5)
ROBOT_FRICTION_RANGE = (0.7, 1.3)
JOINT_SCALE_RANGE = (LOGUNIFORM_FLOOR, 0.01)
OBJECT_MASS_RANGE = (0.5, 1.5)
OBJECT_FRICTION_RANGE = (0.5, 1.5)
OBJECT_SCALE_RANGE = (0.95, 1.05)
OBS_NOISE_CORR = 0.001
OBS_NOISE_UNCORR = 0.002
ACTION_NOISE_CORR = 0.015
ACTION_NOISE_UNCORR = 0.05
GRAVITY_STD = 0.4

GROUPS = ("robot", "object", "observation", "action", "environment")


@dataclass(frozen=True)
class RandomizationProfile:
    """One draw of every randomized quantity.

    The ``*_scale`` fields of the joint rows hold the log-uniform magnitude ``s``; the
    matching ``*_sign`` field (+1 or -1) picks the direction, so the applied factor is
    ``1 + sign * s``.
    """

    robot_mass_scale: float = 1.0
    robot_friction_scale: float = 1.0
    joint_lower_limit_scale: float = 0.0
    joint_lower_limit_sign: float = 1.0
    joint_upper_limit_scale: float = 0.0
    joint_upper_limit_sign: float = 1.0
    stiffness_scale: float = 0.0
    stiffness_sign: float = 1.0
    damping_scale: float = 0.0
    damping_sign: float = 1.0
    object_mass_scale: float = 1.0
    object_friction_scale: float = 1.0
    object_scale: float = 1.0
    obs_noise_corr: float = 0.0
    obs_noise_uncorr: float = 0.0
    action_noise_corr: float = 0.0
    action_noise_uncorr: float = 0.0
    gravity_offset: float = 0.0

    @classmethod
    def identity(cls) -> RandomizationProfile:
        return cls()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RandomizationSchedule:
    refresh_interval_steps: int = 1000
    robot: bool = True
    object: bool = True
    observation: bool = True
    action: bool = True
    environment: bool = True

    def __post_init__(self) -> None:
        if self.refresh_interval_steps <= 0:
            raise ConfigError("refresh_interval_steps must be positive")

    @classmethod
    def disabled(cls, refresh_interval_steps: int = 1000) -> RandomizationSchedule:
        return cls(refresh_interval_steps, *([False] * len(GROUPS)))

    def enabled(self, group: str) -> bool:
        return bool(getattr(self, group))


def _loguniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def _sign(rng: np.random.Generator) -> float:
    return 1.0 if rng.random() < 0.5 else -1.0


def sample_profile(rng: np.random.Generator, schedule: RandomizationSchedule = RandomizationSchedule()) -> RandomizationProfile:
    """Draw every field independently; disabled groups keep their neutral value.

    The number of draws taken from ``rng`` does not depend on which groups are enabled, so
    toggling a group never shifts the random stream of the others.
    """
    robot = dict(
        robot_mass_scale=rng.uniform(*ROBOT_MASS_RANGE),
        robot_friction_scale=rng.uniform(*ROBOT_FRICTION_RANGE),
        joint_lower_limit_scale=_loguniform(rng, *JOINT_SCALE_RANGE),
        joint_lower_limit_sign=_sign(rng),
        joint_upper_limit_scale=_loguniform(rng, *JOINT_SCALE_RANGE),
        joint_upper_limit_sign=_sign(rng),
        stiffness_scale=_loguniform(rng, *JOINT_SCALE_RANGE),
        stiffness_sign=_sign(rng),
        damping_scale=_loguniform(rng, *JOINT_SCALE_RANGE),
        damping_sign=_sign(rng),
    )
    obj = dict(
        object_mass_scale=rng.uniform(*OBJECT_MASS_RANGE),
        object_friction_scale=rng.uniform(*OBJECT_FRICTION_RANGE),
        object_scale=rng.uniform(*OBJECT_SCALE_RANGE),
    )
    gravity = dict(gravity_offset=rng.normal(0.0, GRAVITY_STD))
    fields: dict = {}
    if schedule.robot:
        fields.update(robot)
    if schedule.object:
        fields.update(obj)
    if schedule.observation:
        fields.update(obs_noise_corr=OBS_NOISE_CORR, obs_noise_uncorr=OBS_NOISE_UNCORR)
    if schedule.action:
        fields.update(action_noise_corr=ACTION_NOISE_CORR, action_noise_uncorr=ACTION_NOISE_UNCORR)
    if schedule.environment:
        fields.update(gravity)
    return RandomizationProfile(**{k: float(v) for k, v in fields.items()})


def apply_profile(config: EnvConfig, profile: RandomizationProfile) -> EnvConfig:
    """Return a new config with the profile applied; ``config`` itself is left alone."""
    p = profile
    try:
        return dataclasses.replace(
            config,
            arm_inertia=tuple(i * p.robot_mass_scale for i in config.arm_inertia),
            palm_mass=config.palm_mass * p.robot_mass_scale,
            joint_friction=config.joint_friction * p.robot_friction_scale,
            joint_lower=tuple(q * (1.0 + p.joint_lower_limit_sign * p.joint_lower_limit_scale) for q in config.joint_lower),
            joint_upper=tuple(q * (1.0 + p.joint_upper_limit_sign * p.joint_upper_limit_scale) for q in config.joint_upper),
            stiffness=config.stiffness * (1.0 + p.stiffness_sign * p.stiffness_scale),
            damping=config.damping * (1.0 + p.damping_sign * p.damping_scale),
            object_mass=config.object_mass * p.object_mass_scale,
            object_friction=config.object_friction * p.object_friction_scale,
            object_scale=config.object_scale * p.object_scale,
            gravity=(config.gravity[0], config.gravity[1], config.gravity[2] + p.gravity_offset),
        )
    except ConfigError as exc:
        raise ConfigError(f"randomization produced an invalid config: {exc}") from exc


@dataclass
class EpisodeNoise:
    """Correlated noise drawn once per episode."""

    observation: np.ndarray
    action: np.ndarray = field(default_factory=lambda: np.zeros(0))


def draw_episode_noise(rng: np.random.Generator, profile: RandomizationProfile, obs_dim: int, act_dim: int) -> EpisodeNoise:
    return EpisodeNoise(
        observation=profile.obs_noise_corr * rng.standard_normal(obs_dim),
        action=profile.action_noise_corr * rng.standard_normal(act_dim),
    )


def perturb_observation(obs, profile: RandomizationProfile, episode_noise, rng: np.random.Generator) -> np.ndarray:
    """``obs + episode_noise + fresh uncorrelated draw``."""
    obs = np.asarray(obs, dtype=np.float64)
    return obs + episode_noise + profile.obs_noise_uncorr * rng.standard_normal(obs.shape)


def perturb_action(action, profile: RandomizationProfile, episode_noise, rng: np.random.Generator) -> np.ndarray:
    """Clamp to [-1, 1], add correlated and uncorrelated noise, clamp again."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    a = a + episode_noise + profile.action_noise_uncorr * rng.standard_normal(a.shape)
    return np.clip(a, -1.0, 1.0)
