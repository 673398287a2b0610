"""Shaped team reward and the evaluation metrics (success rate, hit rate, landing spread).

reward = r_dis + r_linvel + r_torque with

    r_dis    = exp(-dis_scale * ||p - G||)
    r_linvel = clamp(v . u_hat, -linvel_clip, linvel_clip)
    r_torque = -torque_coef * ||tau||^2      (tau = thrower joint torques ++ catcher effort)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from handover.errors import ContractError


@dataclass(frozen=True)
class RewardConfig:
    use_dis: bool = True
    use_linvel: bool = True
    use_torque: bool = True
    dis_scale: float = 20.0
    linvel_clip: float = 0.1
    torque_coef: float = 0.003


@dataclass
class RewardBreakdown:
    r_dis: np.ndarray
    r_linvel: np.ndarray
    r_torque: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.r_dis + self.r_linvel + self.r_torque

    def as_dict(self) -> dict:
        return {"r_dis": self.r_dis, "r_linvel": self.r_linvel, "r_torque": self.r_torque}


def reward_terms(obj_pos, goal, obj_vel, u_hat, tau, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Vectorised reward from raw arrays (leading batch axis optional)."""
    dist = np.linalg.norm(np.asarray(obj_pos) - goal, axis=-1)
    r_dis = np.exp(-cfg.dis_scale * dist)
    r_lin = np.clip(np.sum(np.asarray(obj_vel) * u_hat, axis=-1), -cfg.linvel_clip, cfg.linvel_clip)
    r_tq = -cfg.torque_coef * np.sum(np.asarray(tau) ** 2, axis=-1)
    zero = np.zeros_like(dist)
    return RewardBreakdown(
        r_dis if cfg.use_dis else zero,
        r_lin if cfg.use_linvel else zero.copy(),
        r_tq if cfg.use_torque else zero.copy(),
    )


def compute_reward(state, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    tau = np.concatenate([state.thrower_tau, state.catcher_effort], axis=-1)
    return reward_terms(state.obj_pos, state.goal, state.obj_vel, state.u_hat, tau, cfg)


# -- metrics -------------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeOutcome:
    hit: bool
    success: bool
    landing_point: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.success and not self.hit:
            raise ContractError("a successful episode must also be a hit")


def episode_outcome(trace: Sequence[dict]) -> EpisodeOutcome:
    """Classify a finished episode from its per-step records.

    Each record needs ``phase`` and ``events`` (list of names); a dropped record may carry
    ``landing`` (x, y).
    """
    if not trace or trace[-1]["phase"] != "done":
        raise ContractError("episode trace is not terminated")
    events = [e for rec in trace for e in rec["events"]]
    hit = "hit_palm" in events
    dropped_after_catch = False
    seen_catch = False
    landing = None
    for rec in trace:
        if "caught" in rec["events"]:
            seen_catch = True
        if "dropped" in rec["events"]:
            dropped_after_catch = seen_catch
            if rec.get("landing") is not None:
                landing = tuple(float(x) for x in rec["landing"])
    return EpisodeOutcome(hit, seen_catch and not dropped_after_catch, landing)


def outcome_from_events(mask: int, landing=None) -> EpisodeOutcome:
    """Outcome from an accumulated event bitmask (see ``handover.env`` event bits)."""
    from handover.env import CAUGHT_EVENT, DROPPED, HIT_PALM

    caught = bool(mask & CAUGHT_EVENT)
    dropped = bool(mask & DROPPED)
    land = None
    if dropped and landing is not None and np.all(np.isfinite(landing)):
        land = (float(landing[0]), float(landing[1]))
    return EpisodeOutcome(bool(mask & HIT_PALM), caught and not dropped, land)


def success_rate(outcomes: Iterable[EpisodeOutcome]) -> float:
    outs = list(outcomes)
    return sum(o.success for o in outs) / len(outs) if outs else 0.0


def hit_rate(outcomes: Iterable[EpisodeOutcome]) -> float:
    outs = list(outcomes)
    return sum(o.hit for o in outs) / len(outs) if outs else 0.0


def landing_std(outcomes: Iterable) -> tuple[float, float]:
    """Sample std (n-1) of landing x and y; accepts outcomes or raw (x, y) pairs."""
    pts = []
    for o in outcomes:
        lp = o.landing_point if isinstance(o, EpisodeOutcome) else o
        if lp is not None:
            pts.append(lp)
    if len(pts) < 2:
        raise ValueError("landing_std needs at least two landing points")
    arr = np.asarray(pts, dtype=np.float64)
    sd = arr.std(axis=0, ddof=1)
    return float(sd[0]), float(sd[1])


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population std, as reported across evaluation seeds."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std()) if len(arr) > 1 else 0.0
