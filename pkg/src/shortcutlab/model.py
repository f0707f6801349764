"""MLP feature extractor with multiple classification heads.

The Last Layer Ensemble keeps one target head per augmentation kind on a
shared extractor, plus a shift head that predicts which augmentation an
image went through.  The shift head trains on detached features, and at
test time its posterior weights the heads' logits.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .augment import AugmentationKind
from .errors import ConfigError, FormatError
from .numerics import (
    LayerParams,
    RngStream,
    dense_affine,
    dense_affine_backward,
    relu,
    relu_backward,
    sgd_update,
    softmax,
    softmax_cross_entropy,
)

CKPT_VERSION = "shortcutlab-ckpt-v1"
DEFAULT_HIDDEN = (128, 64)
# subtracted from every pixel before the first layer
INPUT_OFFSET = 0.5


@dataclass
class ModelParams:
    extractor: list  # LayerParams, ReLU after each
    heads: dict  # name -> LayerParams; insertion order is the head order
    shift_head: LayerParams

    def __post_init__(self):
        if not self.heads:
            raise ConfigError("a model needs at least one target head")
        dim = self.feature_dim
        for name, h in self.heads.items():
            if h.fan_in != dim:
                raise ConfigError(f"head {name!r} expects {h.fan_in} features, extractor gives {dim}")
        if self.shift_head.fan_in != dim or self.shift_head.fan_out != len(self.heads):
            raise ConfigError(
                f"shift head must map {dim} -> {len(self.heads)}, got "
                f"{self.shift_head.fan_in} -> {self.shift_head.fan_out}"
            )
        for a, b in zip(self.extractor, self.extractor[1:]):
            if a.fan_out != b.fan_in:
                raise ConfigError("extractor layer shapes do not chain")

    @property
    def input_dim(self) -> int:
        return self.extractor[0].fan_in if self.extractor else self.shift_head.fan_in

    @property
    def feature_dim(self) -> int:
        return self.extractor[-1].fan_out if self.extractor else self.shift_head.fan_in

    @property
    def head_names(self) -> tuple:
        return tuple(self.heads)

    def layers(self):
        """``(name, LayerParams)`` for every layer, in a fixed order."""
        out = [(f"extractor.{i}", p) for i, p in enumerate(self.extractor)]
        out += [(f"head.{n}", p) for n, p in self.heads.items()]
        out.append(("shift_head", self.shift_head))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            [p.copy() for p in self.extractor],
            {n: p.copy() for n, p in self.heads.items()},
            self.shift_head.copy(),
        )

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            [p.zeros_like() for p in self.extractor],
            {n: p.zeros_like() for n, p in self.heads.items()},
            self.shift_head.zeros_like(),
        )

    def extractor_hash(self) -> str:
        return _hash_layers(self.extractor)

    def param_hash(self) -> str:
        return _hash_layers([p for _, p in self.layers()])


def _hash_layers(layers) -> str:
    h = hashlib.sha256()
    for p in layers:
        h.update(np.ascontiguousarray(p.weights, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(p.bias, dtype="<f8").tobytes())
    return h.hexdigest()


def init_params(input_dim: int, head_names, rng: RngStream, hidden=DEFAULT_HIDDEN) -> ModelParams:
    """Uniform ``+-1/sqrt(fan_in)`` init.

    Every layer draws from its own child stream keyed by its position, so
    head ``k`` starts identical across models sharing ``rng``.
    """
    head_names = [n.value if isinstance(n, AugmentationKind) else str(n) for n in head_names]
    if len(set(head_names)) != len(head_names):
        raise ConfigError(f"duplicate head names: {head_names}")
    dims = [input_dim, *hidden]
    extractor = [
        LayerParams.uniform_init(dims[i], dims[i + 1], rng.child("extractor", i))
        for i in range(len(hidden))
    ]
    feat = dims[-1]
    heads = {n: LayerParams.uniform_init(feat, 2, rng.child("head", k)) for k, n in enumerate(head_names)}
    shift = LayerParams.uniform_init(feat, len(head_names), rng.child("shift"))
    return ModelParams(extractor, heads, shift)


def flatten_images(images: np.ndarray) -> np.ndarray:
    """``(N, C, H, W)`` pixels in ``[0, 1]`` -> centred ``(N, C*H*W)`` float64 rows."""
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(len(images), int(np.prod(images.shape[1:]))) - INPUT_OFFSET


def extractor_forward(params: ModelParams, x: np.ndarray):
    """Features plus the activations cache needed by :func:`extractor_backward`."""
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ConfigError(f"input has shape {x.shape}, model expects (B, {params.input_dim})")
    cache = [x]
    h = x
    for layer in params.extractor:
        pre = dense_affine(h, layer)
        cache.append(pre)
        h = relu(pre)
    return h, cache


def extractor_backward(params: ModelParams, cache, dfeat) -> list:
    grads = [None] * len(params.extractor)
    d = dfeat
    for i in range(len(params.extractor) - 1, -1, -1):
        pre = cache[i + 1]
        inp = cache[0] if i == 0 else relu(cache[i])
        d = relu_backward(pre, d)
        dx, dw, db = dense_affine_backward(inp, params.extractor[i], d, need_input=i > 0)
        grads[i] = LayerParams(dw, db)
        d = dx
    return grads


def forward_features(params: ModelParams, images: np.ndarray) -> np.ndarray:
    return extractor_forward(params, flatten_images(images))[0]


def head_logits(params: ModelParams, feats, head=None) -> np.ndarray:
    name = params.head_names[0] if head is None else head
    return dense_affine(feats, params.heads[name])


def apply_sgd(params: ModelParams, grads: ModelParams, lr, weight_decay, train_extractor=True) -> ModelParams:
    """SGD on a whole model; with ``train_extractor=False`` the extractor is
    carried over untouched (same arrays)."""
    extractor = (
        [sgd_update(p, g, lr, weight_decay) for p, g in zip(params.extractor, grads.extractor)]
        if train_extractor else params.extractor
    )
    heads = {n: sgd_update(p, grads.heads[n], lr, weight_decay) for n, p in params.heads.items()}
    shift = sgd_update(params.shift_head, grads.shift_head, lr, weight_decay)
    return ModelParams(extractor, heads, shift)


# ---------------------------------------------------------------------------
# Last Layer Ensemble


def lle_training_step(
    params: ModelParams,
    pool,
    index,
    rng: RngStream,
    *,
    lr: float,
    weight_decay: float,
    lambda_shift: float = 1.0,
    stop_gradient: bool = True,
    target_weight: float = 1.0,
):
    """One SGD step of the ensemble on training rows ``index`` of ``pool``.

    Each example is routed to one augmentation kind (uniformly over the
    model's heads), transformed by it, and contributes its target loss to
    that kind's head only.  The total objective is the mean of the per-head
    mean losses plus ``lambda_shift`` times the shift classifier's loss.
    Returns ``(new_params, breakdown)``.
    """
    kinds = params.head_names
    index = np.asarray(index, dtype=np.int64)
    route = rng.child("route").categorical(np.ones(len(kinds)), size=len(index))
    aug_rng = rng.child("augment")
    y = pool.split.y[index]
    x = np.empty((len(index), pool.split.images[0].size))
    for d, kind in enumerate(kinds):
        sel = np.flatnonzero(route == d)
        imgs, _ = pool.apply(kind, index[sel], aug_rng.child(d))
        x[sel] = flatten_images(imgs)

    feats, cache = extractor_forward(params, x)
    grads = params.zeros_like()
    dfeat = np.zeros_like(feats)

    used = [d for d in range(len(kinds)) if np.any(route == d)]
    per_head = {}
    scale = target_weight / len(used) if used else 0.0
    for d in used:
        name = kinds[d]
        sel = np.flatnonzero(route == d)
        head = params.heads[name]
        loss, dlogits = softmax_cross_entropy(dense_affine(feats[sel], head), y[sel])
        per_head[name] = loss
        dlogits = dlogits * scale
        dx, dw, db = dense_affine_backward(feats[sel], head, dlogits)
        grads.heads[name] = LayerParams(dw, db)
        dfeat[sel] += dx

    shift_loss, dshift = softmax_cross_entropy(dense_affine(feats, params.shift_head), route)
    dshift = dshift * lambda_shift
    dx, dw, db = dense_affine_backward(feats, params.shift_head, dshift, need_input=not stop_gradient)
    grads.shift_head = LayerParams(dw, db)
    if not stop_gradient:
        dfeat += dx

    grads.extractor = extractor_backward(params, cache, dfeat)
    target_loss = float(np.mean(list(per_head.values()))) if per_head else 0.0
    new = apply_sgd(params, grads, lr, weight_decay)
    return new, {
        "target_loss": target_loss,
        "shift_loss": shift_loss,
        "per_head": per_head,
        "route_counts": {kinds[d]: int((route == d).sum()) for d in range(len(kinds))},
    }


def parse_mode(mode):
    """``dynamic``, ``mean`` or ``single:<head>`` -> ``(mode, head)``."""
    if isinstance(mode, tuple):
        return mode
    if mode in ("dynamic", "mean"):
        return mode, None
    if isinstance(mode, str) and mode.startswith("single:"):
        return "single", mode.split(":", 1)[1]
    raise ConfigError(f"unknown aggregation mode {mode!r}")


def lle_predict(params: ModelParams, images, mode="dynamic", feats=None):
    """``(class_probs, shift_probs, final_logits)`` for a batch."""
    kind, head = parse_mode(mode)
    if feats is None:
        feats = forward_features(params, images)
    logits = np.stack([dense_affine(feats, params.heads[n]) for n in params.head_names], axis=1)
    shift_probs = softmax(dense_affine(feats, params.shift_head))
    if kind == "dynamic":
        final = np.einsum("bd,bdc->bc", shift_probs, logits)
    elif kind == "mean":
        final = logits.mean(axis=1)
    else:
        if head not in params.heads:
            raise ConfigError(f"no head named {head!r}; have {params.head_names}")
        final = logits[:, params.head_names.index(head)]
    return softmax(final), shift_probs, final


# ---------------------------------------------------------------------------
# last-layer retraining


class HeadTrainer:
    """Training handle that updates head parameters only.

    While frozen the extractor arrays are never replaced, so their hash is
    stable; features of a fixed input set can be cached via ``features``.
    """

    def __init__(self, params: ModelParams, frozen: bool = True):
        self.params = params
        self.frozen = frozen

    def unfreeze(self):
        self.frozen = False

    def step(self, images=None, labels=None, *, lr, weight_decay, sample_weights=None,
             head=None, feats=None):
        head = self.params.head_names[0] if head is None else head
        if self.frozen and feats is not None:
            cache = None
        else:
            feats, cache = extractor_forward(self.params, flatten_images(images))
        layer = self.params.heads[head]
        loss, dlogits = softmax_cross_entropy(dense_affine(feats, layer), labels, sample_weights)
        grads = self.params.zeros_like()
        dx, dw, db = dense_affine_backward(feats, layer, dlogits, need_input=not self.frozen)
        grads.heads[head] = LayerParams(dw, db)
        if not self.frozen:
            grads.extractor = extractor_backward(self.params, cache, dx)
        self.params = apply_sgd(self.params, grads, lr, weight_decay, train_extractor=not self.frozen)
        return loss


def retrain_last_layer_only(params: ModelParams, frozen: bool = True) -> HeadTrainer:
    return HeadTrainer(params, frozen)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, meta: dict | None = None):
    """Header (JSON, length-prefixed) followed by little-endian float64 arrays."""
    layers = params.layers()
    header = {
        "format_version": CKPT_VERSION,
        "extractor": [list(p.weights.shape) for p in params.extractor],
        "heads": [[n, list(p.weights.shape)] for n, p in params.heads.items()],
        "shift_head": list(params.shift_head.weights.shape),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, p in layers:
            f.write(np.ascontiguousarray(p.weights, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(p.bias, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + n])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FormatError(f"{path}: unreadable checkpoint header") from None
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"{path}: version mismatch, found {header.get('format_version')!r}")
    payload = np.frombuffer(raw[8 + n:], dtype="<f8")
    pos = 0

    def take(shape):
        nonlocal pos
        rows, cols = shape
        size = rows * cols + rows
        if pos + size > payload.size:
            raise FormatError(f"{path}: truncated payload")
        w = payload[pos:pos + rows * cols].reshape(rows, cols).astype(np.float64)
        b = payload[pos + rows * cols:pos + size].astype(np.float64)
        pos += size
        return LayerParams(w, b)

    extractor = [take(s) for s in header["extractor"]]
    heads = {name: take(s) for name, s in header["heads"]}
    shift = take(header["shift_head"])
    if pos != payload.size:
        raise FormatError(f"{path}: trailing bytes after payload")
    return ModelParams(extractor, heads, shift), header["meta"]
