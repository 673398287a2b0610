"""Evaluation harness: policy rollouts, ablation settings, pre-throw and wind studies, reports.

Every evaluation runs ``n_trials`` independent single-episode instances side by side, so
instance ``i`` of seed ``s`` sees the same goal, object, gap bias and noise stream whichever
policy drives it. That pairing is what the ordering comparisons rely on.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from handover.config import EnvConfig, GapInjection, wind_vector
from handover.env import ACTION_DIM, CAUGHT_EVENT, DONE, HIT_PALM, HandoverEnv
from handover.errors import ConfigError, ContractError, MissingArtifactError
from handover.estimator import goal_source
from handover.marl import Learner, act, policy_inputs, split_actions
from handover.pipeline import StageCheckpoint, atomic_write
from handover.randomization import RandomizationSchedule
from handover.rewards import EpisodeOutcome, hit_rate, landing_std, mean_std, outcome_from_events, success_rate

SETTINGS = ("ours", "wo_multi_agent", "wo_estimator", "wo_both", "open_loop")
EVAL_SEEDS = 5
EVAL_TRIALS = 100


@dataclass
class Policy:
    """Something that can drive both agents: trained learners (optionally with an estimator
    feeding the catcher's goal) or a fixed recorded action sequence."""

    algo: str = "mappo"
    learners: list[Learner] | None = None
    estimator: object | None = None
    replay: np.ndarray | None = None  # (T, 2 * ACTION_DIM)

    @classmethod
    def from_checkpoint(cls, ck: StageCheckpoint, use_estimator: bool | None = None) -> Policy:
        use = ck.estimator is not None and ck.stage == 3 if use_estimator is None else use_estimator
        if use and ck.estimator is None:
            raise ContractError("checkpoint has no goal estimator")
        return cls(ck.algo, ck.learners, ck.estimator if use else None)

    @classmethod
    def open_loop(cls, actions) -> Policy:
        a = np.asarray(actions, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 2 * ACTION_DIM:
            raise ContractError(f"open-loop recording must be (T, {2 * ACTION_DIM})")
        return cls(replay=a)

    def actions(self, t: int, tobs, cobs, rng):
        n = len(tobs)
        if self.replay is not None:
            row = self.replay[min(t, len(self.replay) - 1)]
            a = np.broadcast_to(row, (n, 2 * ACTION_DIM))
            return a[:, :ACTION_DIM], a[:, ACTION_DIM:]
        acts, _ = act(self.learners, policy_inputs(self.algo, tobs, cobs), rng)
        return split_actions(self.algo, acts)


@dataclass
class EpisodeBatch:
    outcomes: list[EpisodeOutcome]
    returns: np.ndarray
    reward_terms: dict[str, float]
    actions: list[np.ndarray] = field(default_factory=list)


def run_episodes(policy: Policy, env_cfg: EnvConfig, n_trials: int, seed: int, *,
                 gap: GapInjection = GapInjection(), schedule: RandomizationSchedule = RandomizationSchedule(),
                 deterministic: bool = True, catcher_inert: bool = False, record_actions: bool = False,
                 trace: list | None = None) -> EpisodeBatch:
    """One episode per instance; finished instances are frozen until all are done.

    ``trace`` (when given) receives per-step records of instance 0.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    source = goal_source(policy.estimator) if policy.estimator is not None else None
    env = HandoverEnv(env_cfg, n_trials, seed, schedule=schedule, gap=gap, goal_source=source, auto_reset=False)
    tobs, cobs = env.reset()
    rng = None if deterministic else np.random.default_rng([seed, 41])
    returns = np.zeros(n_trials)
    sums = {"r_dis": 0.0, "r_linvel": 0.0, "r_torque": 0.0}
    count = 0
    acts_log = []
    for t in range(env_cfg.horizon):
        ta, ca = policy.actions(t, tobs, cobs, rng)
        if catcher_inert:
            ca = np.zeros_like(ca)
            ca[:, 3] = -1.0
        if record_actions:
            acts_log.append(np.concatenate([ta, ca], axis=1).copy())
        live = env.state.phase != DONE
        res = env.step(ta, ca)
        returns += np.where(live, res.reward, 0.0)
        for k in sums:
            sums[k] += float(np.sum(res.reward_terms[k][live]))
        count += int(live.sum())
        if trace is not None:
            rec = res.final_state.record(0)
            rec["events"] = [n for bit, n in _EVENTS if res.events[0] & bit]
            rec["reward"] = float(res.reward[0])
            trace.append(rec)
        tobs, cobs = res.thrower_obs, res.catcher_obs
        if np.all(env.state.phase == DONE):
            break
    s = env.state
    outs = [outcome_from_events(int(s.episode_events[i]), s.landing[i]) for i in range(n_trials)]
    means = {k: v / max(count, 1) for k, v in sums.items()}
    actions = [np.stack([a[i] for a in acts_log]) for i in range(n_trials)] if record_actions else []
    return EpisodeBatch(outs, returns, means, actions)


from handover.env import EVENT_NAMES  # noqa: E402

_EVENTS = sorted(EVENT_NAMES.items())


# -- reports -------------------------------------------------------------------------------


@dataclass
class EvalReport:
    setting: str
    object_kind: str
    sr_mean: float
    sr_std: float
    hr_mean: float
    hr_std: float
    n_seeds: int
    n_trials: int
    landing_std: tuple[float, float] | None = None
    seeds: list[int] = field(default_factory=list)
    per_seed_sr: list[float] = field(default_factory=list)
    per_seed_hr: list[float] = field(default_factory=list)
    mean_return: float = 0.0
    reward_terms: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for v in (self.sr_mean, self.hr_mean):
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"rate {v} outside [0, 1]")
        if self.sr_std < 0 or self.hr_std < 0:
            raise ContractError("negative std in report")
        if any(s > h + 1e-12 for s, h in zip(self.per_seed_sr, self.per_seed_hr)):
            raise ContractError("success rate exceeds hit rate")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(policy: Policy, env_cfg: EnvConfig, setting: str, object_kind: str, seeds, n_trials: int, *,
             gap: GapInjection = GapInjection(), schedule: RandomizationSchedule = RandomizationSchedule(),
             deterministic: bool = True) -> tuple[EvalReport, list[list[EpisodeOutcome]]]:
    cfg = env_cfg.replace(objects=(object_kind,))
    srs, hrs, rets, all_outs, lands = [], [], [], [], []
    terms = {"r_dis": [], "r_linvel": [], "r_torque": []}
    for s in seeds:
        b = run_episodes(policy, cfg, n_trials, s, gap=gap, schedule=schedule, deterministic=deterministic)
        srs.append(success_rate(b.outcomes))
        hrs.append(hit_rate(b.outcomes))
        rets.append(float(b.returns.mean()))
        for k in terms:
            terms[k].append(b.reward_terms[k])
        all_outs.append(b.outcomes)
        lands += [o.landing_point for o in b.outcomes if o.landing_point is not None]
    sr_m, sr_s = mean_std(srs)
    hr_m, hr_s = mean_std(hrs)
    lstd = landing_std(lands) if len(lands) >= 2 else None
    rep = EvalReport(setting, object_kind, sr_m, sr_s, hr_m, hr_s, len(list(seeds)), n_trials, lstd, list(seeds),
                     srs, hrs, float(np.mean(rets)), {k: float(np.mean(v)) for k, v in terms.items()})
    return rep, all_outs


def record_open_loop(policy: Policy, env_cfg: EnvConfig, seed: int, max_tries: int = 8, n_trials: int = 64) -> np.ndarray:
    """Record the action sequence of one successful closed-loop episode (no gap, no randomization)."""
    for k in range(max_tries):
        b = run_episodes(policy, env_cfg, n_trials, seed + k, schedule=RandomizationSchedule.disabled(),
                         record_actions=True)
        for o, a in zip(b.outcomes, b.actions):
            if o.success:
                return a
    raise ContractError("no successful episode to record for the open-loop baseline")


def paired_sign_test(a_success, b_success) -> tuple[int, int, float]:
    """One-sided sign test that ``a`` succeeds more often than ``b`` on paired trials.

    Returns ``(a_only, b_only, p_value)``; ties are discarded.
    """
    from scipy.stats import binomtest

    a = np.asarray(a_success, dtype=bool)
    b = np.asarray(b_success, dtype=bool)
    a_only, b_only = int(np.sum(a & ~b)), int(np.sum(b & ~a))
    n = a_only + b_only
    p = 1.0 if n == 0 else float(binomtest(a_only, n, 0.5, alternative="greater").pvalue)
    return a_only, b_only, p


# -- studies -------------------------------------------------------------------------------


def fixed_goal_config(env_cfg: EnvConfig, pose: str, objects=("ball",)) -> EnvConfig:
    centre = tuple(0.5 * (lo + hi) for lo, hi in zip(env_cfg.goal_lo, env_cfg.goal_hi))
    return env_cfg.replace(pre_throw_pose=pose, goal_lo=centre, goal_hi=centre, objects=tuple(objects))


def parked_catcher_config(env_cfg: EnvConfig, offset_y: float = 2.0) -> EnvConfig:
    """Pin the palm well to the side of the throw so it never touches the object.

    The thrower does not observe the palm, so its actions are unaffected.
    """
    x, _, _ = env_cfg.palm_home
    spot = (x, offset_y, env_cfg.workspace_lo[2])
    return env_cfg.replace(palm_home=spot, workspace_lo=spot, workspace_hi=spot)


def prethrow_study(policies: dict[str, Policy], env_cfg: EnvConfig, n_trials: int, seed: int = 0,
                   noise_multiplier: float = 1.0) -> dict[str, tuple[float, float, int]]:
    """Landing-point spread ``(std_x, std_y, n_landed)`` per pre-throw pose with the catcher inert.

    Goal fixed at the box centre, randomization off, deterministic actions and the palm parked
    out of the way: the spread then comes from release noise alone. Fewer than two landings
    give NaN spreads.
    """
    if n_trials < 2:
        raise ConfigError("the pre-throw study needs n_trials >= 2")
    out = {}
    gap = GapInjection(enabled=noise_multiplier != 1.0, goal_bias_range=0.0, release_noise_multiplier=noise_multiplier)
    for pose, pol in policies.items():
        cfg = parked_catcher_config(fixed_goal_config(env_cfg, pose))
        b = run_episodes(pol, cfg, n_trials, seed, gap=gap, schedule=RandomizationSchedule.disabled(),
                         catcher_inert=True)
        landed = [o.landing_point for o in b.outcomes if o.landing_point is not None]
        sx, sy = landing_std(landed) if len(landed) >= 2 else (math.nan, math.nan)
        out[pose] = (sx, sy, len(landed))
    return out


def perturb(policy: Policy, env_cfg: EnvConfig, direction: str, magnitude: float, seeds, n_trials: int,
            object_kind: str = "ball", gap: GapInjection = GapInjection(), setting: str = "perturb") -> EvalReport:
    cfg = env_cfg.replace(wind=wind_vector(direction, magnitude))
    rep, _ = evaluate(policy, cfg, f"{setting}:{direction}:{magnitude:g}", object_kind, seeds, n_trials, gap=gap)
    return rep


# -- emission ------------------------------------------------------------------------------


def curve_csv(curve: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["update", "mean_reward", "sr", "hr"])
    for r in curve:
        w.writerow([r["update"], repr(float(r["mean_reward"])), repr(float(r["sr"])), repr(float(r["hr"]))])
    return buf.getvalue()


def curve_svg(curve: list[dict], key: str = "mean_reward", width: int = 480, height: int = 240) -> str:
    """Minimal static line plot of one curve column."""
    pts = [(r["update"], r[key]) for r in curve if r[key] is not None and math.isfinite(r[key])]
    pad = 30
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="18" font-size="12">{key} vs update</text>']
    if len(pts) >= 2:
        xs, ys = zip(*pts)
        x0, x1 = min(xs), max(xs) or 1
        y0, y1 = min(ys), max(ys)
        if y1 == y0:
            y1 = y0 + 1.0
        sx = lambda x: pad + (width - 2 * pad) * (x - x0) / max(x1 - x0, 1)  # noqa: E731
        sy = lambda y: height - pad - (height - 2 * pad) * (y - y0) / (y1 - y0)  # noqa: E731
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        lines.append(f'<polyline fill="none" stroke="black" stroke-width="1" points="{path}"/>')
        lines.append(f'<text x="{pad}" y="{height - 8}" font-size="10">{x0}..{x1}  [{y0:.3g}, {y1:.3g}]</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_jsonl(path, records) -> None:
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def write_curves(out_dir, curve: list[dict], stage: int) -> None:
    out = Path(out_dir)
    atomic_write(out / f"curve_stage{stage}.csv", curve_csv(curve))
    atomic_write(out / f"curve_stage{stage}.svg", curve_svg(curve))


def require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"required artifact not found: {p}")
    return p
