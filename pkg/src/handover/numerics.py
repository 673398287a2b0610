"""Dense-network numerics: MLP forward/backward, Adam, Gaussian policy head, Huber loss.

Everything runs in float64 on numpy arrays. Weights are stored as ``(fan_in, fan_out)``
matrices so a batch ``x`` of shape ``(B, fan_in)`` maps to ``x @ W + b``. Hidden layers use
the configured activation; the output layer is always linear.

Checkpoint byte layout written by :func:`params_to_bytes` (all little-endian)::

    b"MLP1"                      4-byte magic
    uint32 n                     number of layer sizes
    uint32[n] layer_sizes
    uint8 activation             0 = tanh, 1 = relu
    uint8 has_log_std
    float64[...]                 per layer: W row-major (fan_in*fan_out), then b (fan_out);
                                 finally log_std (layer_sizes[-1]) when present
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from handover.errors import CheckpointError, NonFiniteError, ShapeError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)
_MAGIC = b"MLP1"
_ACTIVATIONS = ("tanh", "relu")


@dataclass
class MlpParameters:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    log_std: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ShapeError("an MLP needs at least an input and an output size")
        if self.activation not in _ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of weight/bias arrays does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ShapeError(f"layer {i}: got W{w.shape} b{b.shape}, expected W{expected}")
        if self.log_std is not None and self.log_std.shape != (self.layer_sizes[-1],):
            raise ShapeError("log_std length must equal the output dimension")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def tensors(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``[W0, b0, W1, b1, ..., log_std]``.

        The returned arrays are the live storage, so in-place updates modify the network.
        """
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        if self.log_std is not None:
            out.append(self.log_std)
        return out

    def copy(self) -> MlpParameters:
        return MlpParameters(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            None if self.log_std is None else self.log_std.copy(),
        )

    def load_(self, other: MlpParameters) -> None:
        """Overwrite this network's values with another of identical shape."""
        for dst, src in zip(self.tensors(), other.tensors(), strict=True):
            dst[...] = src

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_mlp(
    layer_sizes,
    rng: np.random.Generator,
    activation: str = "tanh",
    init_std: float | None = None,
    hidden_gain: float = math.sqrt(2.0),
    output_gain: float = 0.01,
) -> MlpParameters:
    """Orthogonal initialisation; pass ``init_std`` to attach a learnable log-std (actors)."""
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        gain = output_gain if i == len(sizes) - 2 else hidden_gain
        weights.append(_orthogonal(rng, sizes[i], sizes[i + 1], gain))
        biases.append(np.zeros(sizes[i + 1]))
    log_std = None if init_std is None else np.full(sizes[-1], math.log(init_std))
    return MlpParameters(sizes, weights, biases, activation, log_std)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _check_input(params: MlpParameters, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.input_dim:
        raise ShapeError(f"input has shape {x.shape}, network expects trailing dim {params.input_dim}")
    return x


def mlp_forward(params: MlpParameters, x) -> np.ndarray:
    """Evaluate the network on a single vector or a ``(batch, in)`` matrix."""
    h = _check_input(params, x)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = _act(params.activation, h)
    return h


@dataclass
class _Cache:
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def mlp_forward_cached(params: MlpParameters, x) -> tuple[np.ndarray, _Cache]:
    h = _check_input(params, x)
    cache = _Cache(squeeze=h.ndim == 1)
    h = np.atleast_2d(h)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        h = h @ w + b
        if i < last:
            h = _act(params.activation, h)
            cache.outputs.append(h)
    return (h[0] if cache.squeeze else h), cache


def mlp_backward(params: MlpParameters, cache: _Cache, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate ``upstream`` (d loss / d output).

    Returns gradients in :meth:`MlpParameters.tensors` order (log-std gradient is zero,
    callers add their own) and the gradient with respect to the network input.
    Batch rows are summed, not averaged.
    """
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if g.shape[-1] != params.output_dim or g.shape[0] != cache.inputs[0].shape[0]:
        raise ShapeError(f"upstream shape {g.shape} does not match network output")
    n_layers = len(params.weights)
    grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            a = cache.outputs[i - 1]
            g = g * (1.0 - a * a) if params.activation == "tanh" else g * (a > 0.0)
    if params.log_std is not None:
        grads.append(np.zeros_like(params.log_std))
    return grads, (g[0] if cache.squeeze else g)


def mlp_gradient(params: MlpParameters, x, upstream) -> list[np.ndarray]:
    """Gradient of ``upstream . f(x)`` with respect to every parameter tensor."""
    _, cache = mlp_forward_cached(params, x)
    grads, _ = mlp_backward(params, cache, upstream)
    return grads


# -- optimisation -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_tensors(cls, tensors, **hyper) -> AdamState:
        return cls([np.zeros_like(t) for t in tensors], [np.zeros_like(t) for t in tensors], **hyper)

    def copy(self) -> AdamState:
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v],
                         self.lr, self.beta1, self.beta2, self.eps, self.step)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``.

    Raises NonFiniteError (and leaves everything untouched) when a gradient is not finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"tensor {i}: param {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in tensor {i}; Adam update rejected")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# -- distributions and losses --------------------------------------------------------------


def clamp_log_std(log_std) -> np.ndarray:
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    """Log density of a diagonal Gaussian, summed over the last axis."""
    log_std = clamp_log_std(log_std)
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    log_std = clamp_log_std(np.asarray(log_std, dtype=np.float64))
    return float(np.sum(0.5 + 0.5 * _LOG_2PI + log_std))


def gaussian_head(mean, log_std, rng: np.random.Generator):
    """Sample ``mean + std * eps``; returns ``(action, log_prob, entropy)``.

    Works on a single mean vector or a ``(batch, dim)`` matrix of means.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    if mean.shape[-1] != log_std.shape[-1]:
        raise ShapeError("mean and log_std must have the same length")
    ls = clamp_log_std(log_std)
    action = mean + np.exp(ls) * rng.standard_normal(mean.shape)
    return action, gaussian_log_prob(mean, ls, action), gaussian_entropy(ls)


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new) -> np.ndarray:
    """KL(old || new) per row for diagonal Gaussians."""
    ls_o, ls_n = clamp_log_std(log_std_old), clamp_log_std(log_std_new)
    var_o, var_n = np.exp(2 * ls_o), np.exp(2 * ls_n)
    return np.sum(ls_n - ls_o + (var_o + (mean_old - mean_new) ** 2) / (2.0 * var_n) - 0.5, axis=-1)


def huber(pred, target, delta: float):
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    e = np.abs(np.asarray(pred, dtype=np.float64) - target)
    out = np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(pred, target, delta: float):
    """d huber / d pred."""
    e = np.asarray(pred, dtype=np.float64) - target
    return np.clip(e, -delta, delta)


# -- serialization -------------------------------------------------------------------------


def params_to_bytes(params: MlpParameters) -> bytes:
    sizes = params.layer_sizes
    header = _MAGIC + struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    header += struct.pack("<BB", _ACTIVATIONS.index(params.activation), params.log_std is not None)
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors())
    return header + body


def params_from_bytes(data: bytes, offset: int = 0) -> tuple[MlpParameters, int]:
    """Decode one network starting at ``offset``; returns it with the offset just past it."""
    try:
        if data[offset:offset + 4] != _MAGIC:
            raise CheckpointError("bad MLP magic")
        (n,) = struct.unpack_from("<I", data, offset + 4)
        sizes = struct.unpack_from(f"<{n}I", data, offset + 8)
        pos = offset + 8 + 4 * n
        act_code, has_log_std = struct.unpack_from("<BB", data, pos)
        pos += 2

        def take(shape):
            nonlocal pos
            count = int(np.prod(shape))
            if pos + 8 * count > len(data):
                raise CheckpointError("truncated MLP parameter stream")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
            return arr

        weights, biases = [], []
        for i in range(n - 1):
            weights.append(take((sizes[i], sizes[i + 1])))
            biases.append(take((sizes[i + 1],)))
        log_std = take((sizes[-1],)) if has_log_std else None
        return MlpParameters(sizes, weights, biases, _ACTIVATIONS[act_code], log_std), pos
    except (struct.error, IndexError, ShapeError) as exc:
        raise CheckpointError(f"corrupt MLP parameter stream: {exc}") from exc
