"""Three-stage training driver, stage checkpoints and the flat config file.

Stage 1 trains both agents with the catcher observing the thrower's goal. Stage 2 freezes
those policies and fits the goal estimator on their rollouts. Stage 3 feeds the estimator's
prediction into the catcher observation and fine-tunes policies and estimator together,
optionally under gap injection.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from handover.config import EnvConfig, GapInjection
from handover.env import CATCHER_FRAME, HandoverEnv, obs_width
from handover.errors import CheckpointError, ConfigError, ContractError, NonFiniteError, VersionError
from handover.estimator import (
    EstimatorConfig,
    JointEstimator,
    build_dataset,
    composite_gradient,
    goal_slices,
    goal_source,
    train_estimator,
)
from handover.marl import (
    EpisodeStats,
    Learner,
    RolloutState,
    TrainConfig,
    collect_rollout,
    create_learners,
    update_learners,
)
from handover.numerics import AdamState, MlpParameters, params_from_bytes, params_to_bytes
from handover.marl import PopArtState
from handover.randomization import RandomizationSchedule

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"HOCK"
# offset of the goal slice inside one catcher observation frame
CATCHER_GOAL_OFFSET = 10
DIVERGENCE_LIMIT = 3


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    randomization: RandomizationSchedule = field(default_factory=RandomizationSchedule)
    # stage 3 adapts to this gap; stage 1 and the stage-2 dataset always run without it
    gap: GapInjection = field(default_factory=lambda: GapInjection(enabled=True))
    stage1_updates: int = 2000
    stage3_updates: int = 300
    dataset_episodes: int = 2000
    estimator_finetune_lr: float = 1e-4
    supervised_weight: float = 0.5
    freeze_estimator: bool = False
    # SR plateau stop: compare SR averaged over consecutive windows of this many updates
    plateau_window: int = 0
    plateau_patience: int = 5
    plateau_delta: float = 0.01
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.stage1_updates < 0 or self.stage3_updates < 0 or self.dataset_episodes < 1:
            raise ConfigError("update budgets must be >= 0 and dataset_episodes >= 1")
        if self.supervised_weight < 0 or self.estimator_finetune_lr < 0:
            raise ConfigError("supervised_weight and estimator_finetune_lr must be non-negative")
        if self.plateau_window < 0 or self.plateau_patience < 1:
            raise ConfigError("plateau_window must be >= 0 and plateau_patience >= 1")

    def replace(self, **kw) -> PipelineConfig:
        return dataclasses.replace(self, **kw)


# -- flat config file ----------------------------------------------------------------------

_SECTIONS = ("env", "train", "estimator", "randomization", "gap")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def flatten_config(cfg: PipelineConfig) -> dict[str, str]:
    out = {"version": str(CONFIG_VERSION)}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sf in dataclasses.fields(v):
                out[f"{f.name}.{sf.name}"] = _format_value(getattr(v, sf.name))
        else:
            out[f.name] = _format_value(v)
    return out


def _parse_scalar(text: str, kind, key: str):
    t = text.strip()
    try:
        if kind is bool:
            if t.lower() not in ("true", "false", "1", "0"):
                raise ValueError(t)
            return t.lower() in ("true", "1")
        if kind is int:
            return int(t)
        if kind is float:
            return float(t)
        return t
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {kind.__name__}") from None


def _parse_value(text: str, default, annotation, key: str):
    if text.strip().lower() == "none":
        if default is None or "None" in str(annotation):
            return None
        raise ConfigError(f"config key {key!r} does not accept none")
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        if default and isinstance(default[0], str):
            return tuple(p.strip() for p in parts)
        return tuple(_parse_scalar(p, float if not default or isinstance(default[0], float) else int, key) for p in parts)
    if default is None:
        return _parse_scalar(text, float, key)
    return _parse_scalar(text, type(default), key)


def parse_config_text(text: str) -> PipelineConfig:
    """Parse ``key = value`` lines (``#`` comments allowed); unknown keys are rejected by name."""
    entries: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        entries[k] = v
    version = entries.pop("version", None)
    if version is None:
        raise ConfigError("config file is missing the 'version' key")
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    base = PipelineConfig()
    top: dict = {}
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, text in entries.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(base, sec)
        else:
            sec, name, obj = None, key, base
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields or (sec is None and name in _SECTIONS):
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(obj))
        value = _parse_value(text, getattr(obj, name), hints.get(name), key)
        (sections[sec] if sec else top)[name] = value
    try:
        for sec in _SECTIONS:
            if sections[sec]:
                top[sec] = dataclasses.replace(getattr(base, sec), **sections[sec])
        return dataclasses.replace(base, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        from handover.errors import MissingArtifactError
        raise MissingArtifactError(f"config file not found: {path}") from None
    return parse_config_text(text)


def config_text(cfg: PipelineConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten_config(cfg).items())


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    tmp.replace(path)


# -- checkpoints ---------------------------------------------------------------------------


@dataclass
class StageCheckpoint:
    stage: int
    algo: str
    learners: list[Learner]
    estimator: MlpParameters | None
    config: dict[str, str]
    seeds: dict[str, int]
    updates: int
    metrics: dict = field(default_factory=dict)
    curve: list[dict] = field(default_factory=list)
    parent_hash: str | None = None
    frozen: list[str] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return checkpoint_to_bytes(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _adam_meta(o: AdamState) -> dict:
    return {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}


def _arrays_bytes(arrs) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrs)


def checkpoint_to_bytes(ck: StageCheckpoint) -> bytes:
    blobs: list[bytes] = []
    meta_learners = []
    for lr_ in ck.learners:
        actor, critic = params_to_bytes(lr_.actor), params_to_bytes(lr_.critic)
        opt = _arrays_bytes(lr_.actor_opt.m + lr_.actor_opt.v + lr_.critic_opt.m + lr_.critic_opt.v)
        blobs += [actor, critic, opt]
        meta_learners.append({"popart": dataclasses.asdict(lr_.popart), "actor_opt": _adam_meta(lr_.actor_opt),
                              "critic_opt": _adam_meta(lr_.critic_opt)})
    if ck.estimator is not None:
        blobs.append(params_to_bytes(ck.estimator))
    meta = {
        "stage": ck.stage, "algo": ck.algo, "config": ck.config, "seeds": ck.seeds, "updates": ck.updates,
        "metrics": ck.metrics, "curve": ck.curve, "parent_hash": ck.parent_hash, "frozen": ck.frozen,
        "learners": meta_learners, "has_estimator": ck.estimator is not None,
        "blob_sizes": [len(b) for b in blobs],
    }
    meta_b = json.dumps(meta, sort_keys=True).encode()
    body = struct.pack("<I", len(meta_b)) + meta_b + b"".join(blobs)
    head = _CKPT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    return head + body + hashlib.sha256(head + body).digest()


def _read_arrays(data: bytes, like: list[np.ndarray]) -> list[np.ndarray]:
    out, off = [], 0
    for t in like:
        n = t.size * 8
        out.append(np.frombuffer(data, dtype="<f8", count=t.size, offset=off).reshape(t.shape).astype(np.float64))
        off += n
    if off != len(data):
        raise CheckpointError("optimizer state size mismatch")
    return out


def checkpoint_from_bytes(data: bytes) -> StageCheckpoint:
    if len(data) < 8 + 32 or data[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a stage checkpoint (bad magic or truncated header)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version} does not match supported version {CHECKPOINT_VERSION}")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointError("checkpoint is corrupt or truncated (checksum mismatch)")
    try:
        (mlen,) = struct.unpack_from("<I", data, 8)
        meta = json.loads(data[12:12 + mlen])
        off = 12 + mlen
        blobs = []
        for size in meta["blob_sizes"]:
            blobs.append(data[off:off + size])
            off += size
        if off != len(data) - 32:
            raise CheckpointError("checkpoint payload length mismatch")
        learners = []
        for i, lm in enumerate(meta["learners"]):
            actor, _ = params_from_bytes(blobs[3 * i])
            critic, _ = params_from_bytes(blobs[3 * i + 1])
            like = actor.tensors() * 2 + critic.tensors() * 2
            arrs = _read_arrays(blobs[3 * i + 2], like)
            na, nc = len(actor.tensors()), len(critic.tensors())
            a_opt = AdamState(arrs[:na], arrs[na:2 * na], **lm["actor_opt"])
            c_opt = AdamState(arrs[2 * na:2 * na + nc], arrs[2 * na + nc:], **lm["critic_opt"])
            learners.append(Learner(actor, critic, a_opt, c_opt, PopArtState(**lm["popart"])))
        estimator = params_from_bytes(blobs[-1])[0] if meta["has_estimator"] else None
    except CheckpointError:
        raise
    except (KeyError, ValueError, IndexError, TypeError, struct.error) as exc:
        raise CheckpointError(f"checkpoint metadata is corrupt: {exc}") from exc
    return StageCheckpoint(meta["stage"], meta["algo"], learners, estimator, meta["config"], meta["seeds"],
                           meta["updates"], meta["metrics"], meta["curve"], meta["parent_hash"], meta["frozen"])


def save_checkpoint(path, ck: StageCheckpoint) -> str:
    """Atomically write ``ck``; returns its content hash."""
    data = checkpoint_to_bytes(ck)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> StageCheckpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        from handover.errors import MissingArtifactError
        raise MissingArtifactError(f"checkpoint not found: {path}") from None
    return checkpoint_from_bytes(data)


def checkpoints_equal(a: StageCheckpoint, b: StageCheckpoint) -> bool:
    return checkpoint_to_bytes(a) == checkpoint_to_bytes(b)


# -- training loop -------------------------------------------------------------------------


class TrainingDiverged(NonFiniteError):
    def __init__(self, message: str, checkpoint: StageCheckpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class UpdateRecord:
    update_index: int
    mean_reward: float
    sr: float
    hr: float
    episodes: int
    actor_loss: list[float]
    critic_loss: list[float]
    kl: list[float]
    lr: list[float]
    actor_grad_norm: list[float]
    critic_grad_norm: list[float]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _seeds(cfg: PipelineConfig, stage: int) -> dict[str, int]:
    return {"master": cfg.seed, "env": cfg.seed * 1000 + stage, "learner": cfg.seed, "sampling": cfg.seed * 1000 + 10 + stage}


def make_env(cfg: PipelineConfig, num_envs: int, seed: int, *, gap: GapInjection | None = None, source=None,
             env: EnvConfig | None = None, auto_reset: bool = True) -> HandoverEnv:
    return HandoverEnv(env or cfg.env, num_envs, seed, schedule=cfg.randomization,
                       gap=gap if gap is not None else GapInjection(), goal_source=source, auto_reset=auto_reset)


class _Plateau:
    def __init__(self, window: int, patience: int, delta: float):
        self.window, self.patience, self.delta = window, patience, delta
        self.succ: list[bool] = []
        self.best = -math.inf
        self.stale = 0

    def push(self, successes: list[bool], update_index: int) -> bool:
        if self.window <= 0:
            return False
        self.succ += successes
        if (update_index + 1) % self.window:
            return False
        sr = float(np.mean(self.succ)) if self.succ else 0.0
        self.succ = []
        if sr > self.best + self.delta:
            self.best, self.stale = sr, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _train_loop(cfg: PipelineConfig, stage: int, learners: list[Learner], env: HandoverEnv, budget: int,
                make_ckpt: Callable[[int, list], StageCheckpoint], joint: JointEstimator | None = None,
                log: Callable[[dict], None] | None = None, ckpt_dir=None):
    tc = cfg.train
    seeds = _seeds(cfg, stage)
    rng = np.random.default_rng([seeds["sampling"], 5])
    state = RolloutState(env, joint.params if joint is not None else None)
    curve: list[dict] = []
    plateau = _Plateau(cfg.plateau_window, cfg.plateau_patience, cfg.plateau_delta)
    fails = 0
    last_good = make_ckpt(0, curve)
    hooks = None
    if joint is not None:
        hooks = _estimator_hooks(tc.algo, env.config.history_frames, joint, lambda: buf_ref[0])
    buf_ref: list = [None]
    done_updates = 0
    for u in range(budget):
        try:
            buf, stats = collect_rollout(state, learners, tc.algo, tc.rollout_length, rng)
            buf_ref[0] = buf
            info = update_learners(learners, buf, tc, rng, hooks)
        except NonFiniteError as exc:
            fails += 1
            if fails >= DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"{fails} consecutive non-finite updates at update {u}: {exc}", last_good) from exc
            state = RolloutState(env, joint.params if joint is not None else None)
            continue
        fails = 0
        done_updates += 1
        rec = UpdateRecord(
            u, float(np.mean(stats.returns)) if stats.returns else float("nan"),
            float(np.mean(stats.successes)) if stats.successes else float("nan"),
            float(np.mean(stats.hits)) if stats.hits else float("nan"), len(stats.returns),
            info.actor_loss, info.critic_loss, info.kl, info.lr, info.actor_grad_norm, info.critic_grad_norm)
        curve.append({"update": u, "mean_reward": rec.mean_reward, "sr": rec.sr, "hr": rec.hr})
        if log is not None:
            log(rec.as_dict())
        if cfg.checkpoint_every and ckpt_dir is not None and (u + 1) % cfg.checkpoint_every == 0:
            last_good = make_ckpt(done_updates, curve)
            save_checkpoint(Path(ckpt_dir) / f"stage{stage}_u{u + 1:06d}.ckpt", last_good)
        if plateau.push(stats.successes, u):
            break
    return done_updates, curve


def _estimator_hooks(algo: str, frames: int, joint: JointEstimator, get_buf):
    """Route the catcher-actor input gradient of each mini-batch into the estimator."""
    offset = 0 if algo == "mappo" else CATCHER_FRAME * frames
    slices = goal_slices(CATCHER_FRAME, CATCHER_GOAL_OFFSET, frames)

    def hook(idx, d_obs):
        buf = get_buf()
        l_, n = buf.shape
        est_in = buf.est_inputs.reshape(l_ * n, frames, -1)[idx]
        d_goal = np.stack([d_obs[:, offset + s.start:offset + s.stop] for s in slices], axis=1)
        rel = buf.released.reshape(-1)[idx]
        labels = buf.goal_labels.reshape(l_ * n, 3)[idx]
        sup_in = est_in[rel, -1]
        grads, joint.last_sup_loss = composite_gradient(joint.params, est_in, d_goal, sup_in, labels[rel], joint.c)
        joint.step(grads)

    return [None, hook] if algo == "mappo" else [hook]


def _summary(curve: list[dict], tail: int = 50) -> dict:
    rows = [r for r in curve[-tail:] if not math.isnan(r["sr"])]
    if not rows:
        return {"sr": None, "hr": None, "mean_reward": None}
    return {k: float(np.mean([r[k] for r in rows])) for k in ("sr", "hr", "mean_reward")}


def run_stage1(cfg: PipelineConfig, *, log=None, ckpt_dir=None, budget: int | None = None) -> StageCheckpoint:
    seeds = _seeds(cfg, 1)
    learners = create_learners(cfg.train, obs_width(cfg.env), seeds["learner"])
    env = make_env(cfg, cfg.train.num_envs, seeds["env"])
    flat = flatten_config(cfg)

    def mk(updates, curve):
        return StageCheckpoint(1, cfg.train.algo, [lr_.copy() for lr_ in learners], None, flat, seeds, updates,
                               _summary(curve), list(curve))

    n = cfg.stage1_updates if budget is None else budget
    updates, curve = _train_loop(cfg, 1, learners, env, n, mk, log=log, ckpt_dir=ckpt_dir)
    return mk(updates, curve)


def _require_stage(ck: StageCheckpoint, stage: int) -> None:
    if ck.stage != stage:
        raise ContractError(f"expected a stage-{stage} checkpoint, got stage {ck.stage}")


def run_stage2(ck1: StageCheckpoint, cfg: PipelineConfig) -> StageCheckpoint:
    _require_stage(ck1, 1)
    seeds = _seeds(cfg, 2)
    frozen = [lr_.copy() for lr_ in ck1.learners]
    env = make_env(cfg, cfg.train.num_envs, seeds["env"])
    ds = build_dataset(env, frozen, ck1.algo, cfg.dataset_episodes, seeds["sampling"])
    est_cfg = dataclasses.replace(cfg.estimator, seed=seeds["learner"])
    params, hist = train_estimator(ds, est_cfg)
    metrics = {"val_mae": hist.val_mae, "epochs": hist.epochs, "samples": len(ds),
               "train_loss": hist.train_loss, "val_loss": hist.val_loss}
    return StageCheckpoint(2, ck1.algo, frozen, params, flatten_config(cfg), seeds, ck1.updates, metrics,
                           list(ck1.curve), ck1.digest(), ["actors", "critics"])


def run_stage3(ck2: StageCheckpoint, cfg: PipelineConfig, *, log=None, ckpt_dir=None,
               budget: int | None = None) -> StageCheckpoint:
    _require_stage(ck2, 2)
    if ck2.estimator is None:
        raise ContractError("stage-2 checkpoint has no estimator")
    seeds = _seeds(cfg, 3)
    learners = [lr_.copy() for lr_ in ck2.learners]
    joint = JointEstimator.create(ck2.estimator.copy(), lr=cfg.estimator_finetune_lr, c=cfg.supervised_weight,
                                  frozen=cfg.freeze_estimator)
    env = make_env(cfg, cfg.train.num_envs, seeds["env"], gap=cfg.gap, source=goal_source(joint.params))
    parent = ck2.digest()
    flat = flatten_config(cfg)

    def mk(updates, curve):
        return StageCheckpoint(3, ck2.algo, [lr_.copy() for lr_ in learners], joint.params.copy(), flat, seeds,
                               updates, _summary(curve), list(curve), parent,
                               ["estimator"] if cfg.freeze_estimator else [])

    n = cfg.stage3_updates if budget is None else budget
    updates, curve = _train_loop(cfg, 3, learners, env, n, mk, joint=joint, log=log, ckpt_dir=ckpt_dir)
    return mk(updates, curve)


def run_pipeline(cfg: PipelineConfig, out_dir=None, log=None) -> tuple[StageCheckpoint, StageCheckpoint, StageCheckpoint]:
    """All three stages in order; with ``out_dir`` each checkpoint and the resolved config are written."""
    ck1 = run_stage1(cfg, log=log, ckpt_dir=out_dir)
    ck2 = run_stage2(ck1, cfg)
    ck3 = run_stage3(ck2, cfg, log=log, ckpt_dir=out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write(out / "resolved_config.txt", config_text(cfg))
        for i, ck in enumerate((ck1, ck2, ck3), 1):
            save_checkpoint(out / f"stage{i}.ckpt", ck)
    return ck1, ck2, ck3
