"""Dense layers, losses, SGD and counter-based random streams.

Matrices are plain 2-D ``numpy`` arrays (row-major, ``float64``).  Every
differentiable operation comes as a forward function plus an explicit
backward function; there is no autodiff graph.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, TrainingError

MASK64 = (1 << 64) - 1
# log() argument floor for the cross-entropy losses
LOG_FLOOR = 1e-12


@dataclass
class LayerParams:
    """Weights ``(out, in)`` and bias ``(out,)`` of one affine layer."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigError(
                f"inconsistent layer shapes: weights {self.weights.shape}, "
                f"bias {self.bias.shape}"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy())

    def zeros_like(self) -> "LayerParams":
        return LayerParams(np.zeros_like(self.weights), np.zeros_like(self.bias))

    @classmethod
    def uniform_init(cls, fan_in: int, fan_out: int, rng: "RngStream") -> "LayerParams":
        bound = 1.0 / np.sqrt(fan_in)
        w = (rng.uniform((fan_out, fan_in)) * 2.0 - 1.0) * bound
        b = (rng.uniform(fan_out) * 2.0 - 1.0) * bound
        return cls(w, b)


# ---------------------------------------------------------------------------
# layers


def dense_affine(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """``x @ W.T + b`` for a batch ``x`` of shape ``(B, in)``."""
    if x.ndim != 2 or x.shape[1] != params.fan_in:
        raise ConfigError(
            f"dense_affine: input shape {x.shape} does not match layer "
            f"({params.fan_out}x{params.fan_in})"
        )
    return x @ params.weights.T + params.bias


def dense_affine_backward(x, params, dout, need_input=True):
    """Gradients ``(dInput, dWeights, dBias)`` of :func:`dense_affine`.

    ``dInput`` is ``None`` when ``need_input`` is false (first layer).
    """
    if dout.shape != (x.shape[0], params.fan_out):
        raise ConfigError(f"dense_affine_backward: dout shape {dout.shape} mismatch")
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ params.weights if need_input else None
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n_classes, n_rows):
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DataError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label out of range [0, {n_classes})")
    return labels.astype(np.int64)


def _check_weights(sample_weights, n_rows):
    if sample_weights is None:
        return np.ones(n_rows)
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n_rows,):
        raise DataError(f"expected {n_rows} sample weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("sample weights must be finite and non-negative")
    return w


def cross_entropy_per_sample(logits, labels):
    """Unreduced ``-log softmax(logits)[label]``."""
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    p = softmax(logits)
    return -np.log(np.maximum(p[np.arange(len(labels)), labels], LOG_FLOOR))


def softmax_cross_entropy(logits, labels, sample_weights=None):
    """Weighted mean cross-entropy and its gradient w.r.t. the logits.

    ``loss = sum_i w_i * ce_i / sum_i w_i`` and
    ``dlogits = w * (softmax - onehot) / sum(w)``.  A batch whose weights
    sum to zero yields a zero loss and zero gradient.
    """
    n, c = logits.shape
    labels = _check_labels(labels, c, n)
    w = _check_weights(sample_weights, n)
    p = softmax(logits)
    rows = np.arange(n)
    ce = -np.log(np.maximum(p[rows, labels], LOG_FLOOR))
    total = w.sum()
    if total == 0:
        return 0.0, np.zeros_like(logits)
    grad = p
    grad[rows, labels] -= 1.0
    grad *= (w / total)[:, None]
    return float((w * ce).sum() / total), grad


def soft_target_cross_entropy(logits, targets):
    """Mean cross-entropy against per-row target distributions ``targets``."""
    if targets.shape != logits.shape:
        raise ConfigError("targets must have the same shape as logits")
    n = logits.shape[0]
    p = softmax(logits)
    loss = -(targets * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=1).mean()
    grad = (p * targets.sum(axis=1, keepdims=True) - targets) / n
    return float(loss), grad


def generalized_cross_entropy(logits, labels, q, sample_weights=None):
    """Generalized cross-entropy ``(1 - p_y**q) / q`` (weighted mean).

    d/dz_j of ``-p_y**q / q`` is ``p_y**q * (p_j - [j == y])``.
    """
    if not q > 0 or q > 1:
        raise ConfigError(f"q must lie in (0, 1], got {q}")
    n, c = logits.shape
    labels = _check_labels(labels, c, n)
    w = _check_weights(sample_weights, n)
    p = softmax(logits)
    rows = np.arange(n)
    py_q = p[rows, labels] ** q
    per_sample = (1.0 - py_q) / q
    total = w.sum()
    if total == 0:
        return 0.0, np.zeros_like(logits)
    grad = p
    grad[rows, labels] -= 1.0
    grad *= (py_q * w / total)[:, None]
    return float((w * per_sample).sum() / total), grad


# ---------------------------------------------------------------------------
# optimizer


def sgd_update(params: LayerParams, grads: LayerParams, lr: float, weight_decay: float) -> LayerParams:
    """``w <- w - lr * (g + weight_decay * w)``; biases are decayed too."""
    if lr < 0 or weight_decay < 0:
        raise ConfigError(f"lr and weight_decay must be non-negative (lr={lr}, wd={weight_decay})")
    for name, g in (("weights", grads.weights), ("bias", grads.bias)):
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingError(f"non-finite gradient in {name}: {bad} of {g.size} entries")
    return LayerParams(
        params.weights - lr * (grads.weights + weight_decay * params.weights),
        params.bias - lr * (grads.bias + weight_decay * params.bias),
    )


# ---------------------------------------------------------------------------
# random streams


def derive_id(*parts) -> int:
    """Stable 64-bit id from a sequence of ints and strings (BLAKE2b)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, str):
            data = part.encode()
            h.update(b"s" + struct.pack("<Q", len(data)) + data)
        else:
            h.update(b"i" + struct.pack("<Q", int(part) & MASK64))
    return struct.unpack("<Q", h.digest())[0]


class RngStream:
    """Counter-based random stream keyed by ``(master_seed, stream_id)``.

    Backed by the Philox-4x64 bit generator, whose output for a given key and
    counter is fixed across platforms.  ``counter`` selects the starting
    block; uniforms are 53-bit doubles in ``[0, 1)``, normals use the
    Box-Muller transform and categoricals invert the CDF of a uniform draw.
    """

    def __init__(self, master_seed: int, stream_id: int = 0, counter: int = 0):
        self.master_seed = int(master_seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        self.start_counter = int(counter) & MASK64
        key = np.array([self.master_seed, self.stream_id], dtype=np.uint64)
        ctr = np.array([self.start_counter, 0, 0, 0], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id}, counter={self.start_counter})"

    def child(self, *parts) -> "RngStream":
        """Independent stream derived from this one and ``parts``."""
        return RngStream(self.master_seed, derive_id(self.stream_id, *parts))

    @property
    def counter(self) -> int:
        """Current Philox block counter (advances by one per 4 words drawn)."""
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = self._gen.random(2 * n)
        r = np.sqrt(-2.0 * np.log1p(-u[:n]))
        z = r * np.cos(2.0 * np.pi * u[n:])
        return float(z[0]) if size is None else z.reshape(size)

    def categorical(self, weights, size=None):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ConfigError("categorical weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigError("categorical weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ConfigError("categorical weights must not all be zero")
        cdf = np.cumsum(w) / total
        u = self._gen.random(size)
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), w.size - 1)
        return int(idx) if size is None else idx.astype(np.int64)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def beta(self, a, b, size=None):
        return self._gen.beta(a, b, size)


def rng_next(stream: RngStream, kind: str, size=None, weights=None):
    """Draw from ``stream``: ``kind`` is uniform, normal or categorical."""
    if kind == "uniform":
        return stream.uniform(size)
    if kind == "normal":
        return stream.normal(size)
    if kind == "categorical":
        if weights is None:
            raise ConfigError("categorical draws need weights")
        return stream.categorical(weights, size)
    raise ConfigError(f"unknown draw kind {kind!r}")
