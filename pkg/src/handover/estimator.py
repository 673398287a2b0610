"""Goal estimator: predicts the thrower's goal from a short history of object positions.

The input is a window of the last ``frames`` noisy object positions (oldest first, padded at
the front with copies of the first observed frame), flattened to ``3 * frames`` reals. The
training loss is the squared Euclidean distance between prediction and label.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from handover.errors import CheckpointError, ContractError, NonFiniteError, ShapeError
from handover.numerics import AdamState, MlpParameters, adam_step, init_mlp, mlp_backward, mlp_forward, mlp_forward_cached

WINDOW_FRAMES = 20
_DATASET_MAGIC = b"GEDS"


@dataclass
class HistoryWindow:
    positions: np.ndarray  # (frames, 3), oldest first
    valid_count: int

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError("window positions must be (frames, 3)")
        if not 1 <= self.valid_count <= len(self.positions):
            raise ShapeError(f"valid_count {self.valid_count} outside [1, {len(self.positions)}]")

    @classmethod
    def from_observed(cls, observed, frames: int = WINDOW_FRAMES) -> HistoryWindow:
        """Window ending at the last of ``observed`` positions (needs at least one)."""
        obs = np.asarray(observed, dtype=np.float64).reshape(-1, 3)
        if len(obs) == 0:
            raise ShapeError("need at least one observed position")
        tail = obs[-frames:]
        pad = np.repeat(tail[:1], frames - len(tail), axis=0)
        return cls(np.concatenate([pad, tail]), len(tail))

    def flat(self) -> np.ndarray:
        return self.positions.reshape(-1)


@dataclass(frozen=True)
class EstimatorConfig:
    hidden: tuple[int, ...] = (64, 64)
    frames: int = WINDOW_FRAMES
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 10
    min_delta: float = 1e-5
    val_fraction: float = 0.1
    seed: int = 0


def init_estimator(cfg: EstimatorConfig, rng: np.random.Generator | None = None) -> MlpParameters:
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 21])
    return init_mlp((3 * cfg.frames, *cfg.hidden, 3), rng, output_gain=1.0)


def goal_loss(pred, label) -> np.ndarray:
    """Per-sample squared Euclidean distance."""
    d = np.asarray(pred, dtype=np.float64) - label
    return np.sum(d * d, axis=-1)


def predict_goal(params: MlpParameters, window) -> np.ndarray:
    """Pure forward pass on a HistoryWindow, a flat window, or a batch of flat windows."""
    x = window.flat() if isinstance(window, HistoryWindow) else np.asarray(window, dtype=np.float64)
    if x.shape[-1] != params.input_dim and x.ndim >= 2 and x.shape[-2:] == (params.input_dim // 3, 3):
        x = x.reshape(*x.shape[:-2], params.input_dim)
    return mlp_forward(params, x)


def goal_source(params: MlpParameters):
    """Adapter for ``HandoverEnv(goal_source=...)``: ``(windows (n, f, 3), valid_count) -> (n, 3)``."""
    def source(windows, valid_count):
        w = np.asarray(windows)
        return mlp_forward(params, w.reshape(len(w), -1))
    return source


# -- dataset -------------------------------------------------------------------------------


@dataclass
class EstimatorDataset:
    inputs: np.ndarray  # (M, 3 * frames)
    labels: np.ndarray  # (M, 3)
    shuffle_seed: int = 0
    episode_lengths: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or self.labels.shape != (len(self.inputs), 3):
            raise ShapeError("dataset needs (M, D) inputs and (M, 3) labels")

    def __len__(self) -> int:
        return len(self.inputs)

    def save(self, path) -> None:
        m, d = self.inputs.shape
        body = np.concatenate([self.inputs, self.labels], axis=1).astype("<f8").tobytes()
        data = _DATASET_MAGIC + struct.pack("<QI", m, d) + body
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> EstimatorDataset:
        data = Path(path).read_bytes()
        if len(data) < 16 or data[:4] != _DATASET_MAGIC:
            raise CheckpointError(f"{path}: not an estimator dataset file")
        m, d = struct.unpack_from("<QI", data, 4)
        need = 16 + 8 * m * (d + 3)
        if len(data) != need:
            raise CheckpointError(f"{path}: expected {need} bytes for {m} records, found {len(data)}")
        arr = np.frombuffer(data, dtype="<f8", offset=16).reshape(m, d + 3).astype(np.float64)
        return cls(arr[:, :d].copy(), arr[:, d:].copy())


def build_dataset(env, learners, algo: str, n_episodes: int, seed: int, deterministic: bool = False) -> EstimatorDataset:
    """Roll out frozen policies and keep one sample per post-release control step.

    The window observed after each step is paired with the episode's thrower goal. Episodes
    are committed in completion order (ties by environment index) until ``n_episodes`` are
    collected, then the samples are shuffled with ``seed``.
    """
    from handover.marl import RolloutState, act, policy_inputs, split_actions

    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    rng = None if deterministic else np.random.default_rng([seed, 31])
    state = RolloutState(env)
    n = env.num_envs
    pending: list[list[np.ndarray]] = [[] for _ in range(n)]
    inputs, labels, lengths = [], [], []
    throws = 0
    max_steps = 10 * (n_episodes // n + 2) * env.config.horizon
    for _ in range(max_steps):
        if len(lengths) >= n_episodes:
            break
        actions, _ = act(learners, policy_inputs(algo, state.thrower_obs, state.catcher_obs), rng)
        res = env.step(*split_actions(algo, actions))
        fs = res.final_state
        for i in range(n):
            if fs.release_step[i] >= 0:
                # a finished instance has already been reset, so its terminal window is gone
                if not res.done[i]:
                    pending[i].append(env.window[i].reshape(-1).copy())
        for i in np.flatnonzero(res.done):
            if len(lengths) < n_episodes:
                if fs.release_step[i] >= 0:
                    throws += 1
                lengths.append(len(pending[i]))
                inputs.extend(pending[i])
                labels.extend([fs.goal[i].copy()] * len(pending[i]))
            pending[i] = []
        state.thrower_obs, state.catcher_obs = res.thrower_obs, res.catcher_obs
    if throws == 0 or not inputs:
        raise ContractError(f"no released throws in {len(lengths)} generated episodes; cannot build a goal dataset")
    x, y = np.asarray(inputs), np.asarray(labels)
    perm = np.random.default_rng([seed, 32]).permutation(len(x))
    return EstimatorDataset(x[perm], y[perm], seed, lengths)


# -- training ------------------------------------------------------------------------------


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_mae: float = math.nan
    epochs: int = 0


def mean_abs_error(params: MlpParameters, inputs, labels) -> float:
    """Mean Euclidean distance between predictions and labels, in metres."""
    if len(inputs) == 0:
        return math.nan
    return float(np.mean(np.linalg.norm(mlp_forward(params, inputs) - labels, axis=-1)))


def supervised_gradient(params: MlpParameters, inputs, labels) -> tuple[float, list[np.ndarray]]:
    """Mean squared-distance loss over the batch and its parameter gradient."""
    pred, cache = mlp_forward_cached(params, inputs)
    d = pred - labels
    loss = float(np.mean(np.sum(d * d, axis=-1)))
    grads, _ = mlp_backward(params, cache, 2.0 * d / len(d))
    return loss, grads


def train_estimator(dataset: EstimatorDataset, cfg: EstimatorConfig = EstimatorConfig(),
                    params: MlpParameters | None = None) -> tuple[MlpParameters, TrainHistory]:
    """Mini-batch Adam until the validation loss stops improving by ``min_delta`` for ``patience`` epochs."""
    if len(dataset) == 0:
        raise ContractError("cannot train the goal estimator on an empty dataset")
    rng = np.random.default_rng([cfg.seed, 22])
    params = params.copy() if params is not None else init_estimator(cfg, rng)
    if params.input_dim != dataset.inputs.shape[1]:
        raise ShapeError(f"estimator expects {params.input_dim} inputs, dataset has {dataset.inputs.shape[1]}")
    n_val = int(round(cfg.val_fraction * len(dataset))) if len(dataset) > 1 else 0
    x_val, y_val = dataset.inputs[:n_val], dataset.labels[:n_val]
    x_tr, y_tr = dataset.inputs[n_val:], dataset.labels[n_val:]
    if len(x_val) == 0:
        x_val, y_val = x_tr, y_tr
    opt = AdamState.for_tensors(params.tensors(), lr=cfg.lr)
    hist = TrainHistory()
    best, best_params, since = math.inf, params.copy(), 0
    for _ in range(cfg.max_epochs):
        perm = rng.permutation(len(x_tr))
        total = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss, grads = supervised_gradient(params, x_tr[idx], y_tr[idx])
            if not math.isfinite(loss):
                raise NonFiniteError(f"goal estimator loss diverged at epoch {hist.epochs}")
            adam_step(opt, params.tensors(), grads)
            total += loss * len(idx)
        hist.train_loss.append(total / len(x_tr))
        val = float(np.mean(goal_loss(mlp_forward(params, x_val), y_val)))
        if not math.isfinite(val):
            raise NonFiniteError(f"goal estimator validation loss diverged at epoch {hist.epochs}")
        hist.val_loss.append(val)
        hist.epochs += 1
        if val < best - cfg.min_delta:
            best, best_params, since = val, params.copy(), 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    hist.val_mae = mean_abs_error(best_params, x_val, y_val)
    return best_params, hist


# -- joint fine-tuning ---------------------------------------------------------------------


def goal_slices(frame_width: int, goal_offset: int, frames: int) -> list[slice]:
    return [slice(j * frame_width + goal_offset, j * frame_width + goal_offset + 3) for j in range(frames)]


def composite_gradient(params: MlpParameters, frame_inputs, d_goal, sup_inputs, sup_labels, c: float):
    """Estimator gradient for joint fine-tuning.

    ``frame_inputs`` is ``(B, k, D)``: the window that produced the goal slice of each of the
    ``k`` stacked observation frames; ``d_goal`` is ``(B, k, 3)``, the actor-loss gradient
    w.r.t. those slices. The result is the backpropagated actor gradient plus ``c`` times
    the supervised-loss gradient on ``(sup_inputs, sup_labels)``.
    """
    b, k, d = frame_inputs.shape
    _, cache = mlp_forward_cached(params, frame_inputs.reshape(b * k, d))
    grads, _ = mlp_backward(params, cache, np.asarray(d_goal, dtype=np.float64).reshape(b * k, 3))
    sup_loss = 0.0
    if c != 0.0 and len(sup_inputs):
        sup_loss, sg = supervised_gradient(params, sup_inputs, sup_labels)
        grads = [g + c * s for g, s in zip(grads, sg)]
    return grads, sup_loss


@dataclass
class JointEstimator:
    """Estimator being fine-tuned alongside the catcher actor.

    When ``frozen`` the gradients are still computed and accumulated (``pending``) but the
    parameters are never changed.
    """

    params: MlpParameters
    opt: AdamState
    c: float = 0.5
    frozen: bool = False
    pending: list[np.ndarray] | None = None
    last_sup_loss: float = 0.0

    @classmethod
    def create(cls, params: MlpParameters, lr: float = 1e-4, c: float = 0.5, frozen: bool = False) -> JointEstimator:
        return cls(params, AdamState.for_tensors(params.tensors(), lr=lr), c, frozen)

    def step(self, grads: list[np.ndarray]) -> None:
        if self.pending is None:
            self.pending = [g.copy() for g in grads]
        else:
            for p, g in zip(self.pending, grads):
                p += g
        if self.frozen or self.opt.lr == 0.0:
            return
        adam_step(self.opt, self.params.tensors(), grads)
