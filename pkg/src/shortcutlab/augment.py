"""Targeted and generic image augmentations.

Targeted augmentations each rewrite the pixels of exactly one cue: the
watermark band, the background (everything outside the two masks), the
co-object region, or the inside of the target mask.  Category-1
augmentations (mixup, cutout, cutmix) act on whole batches and return the
label weights of the two images mixed into every output.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PreconditionError
from .numerics import RngStream


class AugmentationKind(str, enum.Enum):
    identity = "identity"
    watermark_random = "watermark_random"
    background_swap = "background_swap"
    coobject_swap = "coobject_swap"
    texture_randomize = "texture_randomize"
    mixup = "mixup"
    cutout = "cutout"
    cutmix = "cutmix"


TARGETED = (
    AugmentationKind.watermark_random,
    AugmentationKind.background_swap,
    AugmentationKind.coobject_swap,
    AugmentationKind.texture_randomize,
)
CATEGORY1 = (AugmentationKind.mixup, AugmentationKind.cutout, AugmentationKind.cutmix)


# ---------------------------------------------------------------------------
# watermark


@dataclass(frozen=True)
class WatermarkParams:
    """Geometry of a watermark band, as fractions of the image size."""

    anchor_x_frac: float = 0.01
    anchor_y_frac: float = 0.40
    height_frac: float = 0.16
    stroke_period: int = 3
    alpha: float = 128 / 255
    seed: int | None = None

    def pixel_box(self, h: int, w: int):
        """``(y0, x0, height, width)`` in pixels; the band runs to the right edge."""
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"watermark alpha={self.alpha} outside [0, 1]")
        if self.stroke_period < 1:
            raise ConfigError(f"stroke_period must be >= 1, got {self.stroke_period}")
        x0 = int(round(self.anchor_x_frac * w))
        y0 = int(round(self.anchor_y_frac * h))
        bh = max(1, int(round(self.height_frac * h)))
        if not (0 <= x0 < w and 0 <= y0 and y0 + bh <= h):
            raise ConfigError(f"watermark band at ({y0}, {x0}) with height {bh} does not fit a {h}x{w} image")
        return y0, x0, bh, w - x0


EVAL_WATERMARK = WatermarkParams()


def watermark_pattern(params: WatermarkParams, h: int, w: int) -> np.ndarray:
    """Boolean ``(H, W)`` mask of the pattern pixels: strokes plus a midline."""
    y0, x0, bh, bw = params.pixel_box(h, w)
    mask = np.zeros((h, w), dtype=bool)
    cols = np.arange(x0, x0 + bw)
    mask[y0:y0 + bh, cols[(cols - x0) % params.stroke_period == 0]] = True
    mask[y0 + bh // 2, x0:x0 + bw] = True
    return mask


def overlay_watermark(image: np.ndarray, params: WatermarkParams = EVAL_WATERMARK) -> np.ndarray:
    """Alpha-composite white onto the watermark pattern of ``image``.

    Accepts one ``(C, H, W)`` image or a ``(N, C, H, W)`` batch and returns a
    new array of the same dtype.
    """
    h, w = image.shape[-2:]
    mask = watermark_pattern(params, h, w)
    out = image.copy()
    a = params.alpha
    out[..., mask] = (1.0 - a) * out[..., mask] + a * 1.0
    return out


def _resolve(params: WatermarkParams, h, w):
    y0, x0, bh, _ = params.pixel_box(h, w)
    return y0, x0, bh, params.stroke_period


def random_watermark_params(h: int, w: int, rng: RngStream) -> WatermarkParams:
    """Random band geometry that never resolves to the evaluation watermark."""
    forbidden = _resolve(EVAL_WATERMARK, h, w)
    while True:
        bh = max(1, int(round((0.10 + 0.12 * rng.uniform()) * h)))
        period = 2 + rng.categorical([1.0, 1.0, 1.0])
        x0 = int(rng.integers(0, w))
        y0 = int(rng.integers(0, h - bh + 1))
        p = WatermarkParams(x0 / w, y0 / h, bh / h, period, EVAL_WATERMARK.alpha)
        if _resolve(p, h, w) != forbidden:
            return p


def watermark_random(image: np.ndarray, rng: RngStream) -> np.ndarray:
    h, w = image.shape[-2:]
    return overlay_watermark(image, random_watermark_params(h, w, rng))


# ---------------------------------------------------------------------------
# mask-based swaps


def _check_cross_class(sample, donor):
    if donor.y == sample.y:
        raise PreconditionError(f"donor must come from the other class (both are class {sample.y})")


def background_swap(sample, donor, donor_background: np.ndarray) -> np.ndarray:
    """Paste ``sample``'s glyph and co-object onto ``donor``'s background.

    ``donor_background`` is the donor's noisy background-only render
    (:func:`shortcutlab.synth.render_background`).
    """
    _check_cross_class(sample, donor)
    keep = sample.target_mask | sample.coobject_mask
    return np.where(keep[None], sample.image, donor_background).astype(sample.image.dtype)


def coobject_swap(sample, donor, sample_background: np.ndarray) -> np.ndarray:
    """Replace ``sample``'s co-object by ``donor``'s.

    Pixels of the old co-object not covered by the new one are restored
    from ``sample_background``.  The co-object mask of the result is the
    donor's.
    """
    _check_cross_class(sample, donor)
    out = np.where(sample.coobject_mask[None], sample_background, sample.image)
    out = np.where(donor.coobject_mask[None], donor.image, out)
    return out.astype(sample.image.dtype)


def texture_randomize(sample, rng: RngStream) -> np.ndarray:
    """Refill the target mask with a random blocky two-tone texture."""
    return _texture_into(sample.image, sample.target_mask, rng)


def _texture_into(image, mask, rng):
    c, h, w = image.shape
    block = int(rng.integers(1, 4))
    gh, gw = -(-h // block), -(-w // block)
    tones = rng.uniform((2, c))
    choice = rng.uniform((gh, gw)) < rng.uniform()
    field = np.where(choice[None], tones[0][:, None, None], tones[1][:, None, None])
    field = np.repeat(np.repeat(field, block, axis=1), block, axis=2)[:, :h, :w]
    field = np.clip(field + 0.1 * (rng.uniform((c, h, w)) - 0.5), 0.0, 1.0)
    return np.where(mask[None], field, image).astype(image.dtype)


class AugmentationPool:
    """Applies targeted augmentations to rows of a training split.

    Donors for the swaps are drawn uniformly from the other target class.
    Every call returns float64 images plus the cue labels of the outputs.
    """

    def __init__(self, split):
        self.split = split
        self._by_class = {c: np.flatnonzero(split.y == c) for c in (0, 1)}

    def donors(self, index, rng: RngStream) -> np.ndarray:
        y = self.split.y[index]
        out = np.empty(len(index), dtype=np.int64)
        for c in (0, 1):
            sel = y == c
            pool = self._by_class[1 - c]
            if sel.any():
                if len(pool) == 0:
                    raise PreconditionError(f"no class-{1 - c} donors available")
                out[sel] = pool[rng.integers(0, len(pool), size=int(sel.sum()))]
        return out

    def apply(self, kind, index, rng: RngStream):
        kind = AugmentationKind(kind)
        sp = self.split
        index = np.asarray(index, dtype=np.int64)
        images = sp.images[index].astype(np.float64)
        cue_labels = sp.cue_labels[index].copy()
        if kind is AugmentationKind.identity or len(index) == 0:
            return images, cue_labels
        names = sp.config.cue_names
        if kind is AugmentationKind.background_swap:
            donor = self.donors(index, rng)
            keep = (sp.target_mask[index] | sp.coobject_mask[index])[:, None]
            images = np.where(keep, images, sp.backgrounds()[donor])
            cue_labels[:, names.index("background")] = sp.cue("background")[donor]
        elif kind is AugmentationKind.coobject_swap:
            donor = self.donors(index, rng)
            old = sp.coobject_mask[index][:, None]
            new = sp.coobject_mask[donor][:, None]
            images = np.where(old, sp.backgrounds()[index], images)
            images = np.where(new, sp.images[donor], images)
            cue_labels[:, names.index("coobject")] = sp.cue("coobject")[donor]
        elif kind is AugmentationKind.watermark_random:
            h, w = images.shape[-2:]
            images = np.stack([
                overlay_watermark(img, random_watermark_params(h, w, rng)) for img in images
            ])
        elif kind is AugmentationKind.texture_randomize:
            images = np.stack([
                _texture_into(img, m, rng) for img, m in zip(images, sp.target_mask[index])
            ])
        else:
            raise ConfigError(f"{kind.value} is not a per-sample targeted augmentation")
        return images, cue_labels


# ---------------------------------------------------------------------------
# category 1


DEFAULT_CATEGORY1 = {"mixup": {"alpha": 0.2}, "cutout": {"p": 0.1}, "cutmix": {"alpha": 1.0}}


def category1_augment(kind, batch: np.ndarray, labels, rng: RngStream, params=None):
    """Mixup, cutout or cutmix on a ``(B, C, H, W)`` batch.

    Returns ``(images, partner, weights)``: output row ``i`` mixes image
    ``i`` (label weight ``weights[i, 0]``) with image ``partner[i]`` (label
    weight ``weights[i, 1]``).
    """
    kind = AugmentationKind(kind)
    params = {**DEFAULT_CATEGORY1.get(kind.value, {}), **(params or {})}
    n, _, h, w = batch.shape
    out = batch.astype(np.float64, copy=True)
    weights = np.zeros((n, 2))
    weights[:, 0] = 1.0
    partner = np.arange(n)

    if kind is AugmentationKind.cutout:
        p = params["p"]
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"cutout p={p} outside [0, 1]")
        side = int(round(np.sqrt(p * h * w)))
        side = min(side, h, w)
        if side > 0:
            ys = rng.integers(0, h - side + 1, size=n)
            xs = rng.integers(0, w - side + 1, size=n)
            for i in range(n):
                out[i, :, ys[i]:ys[i] + side, xs[i]:xs[i] + side] = 0.0
        return out, partner, weights

    if kind not in (AugmentationKind.mixup, AugmentationKind.cutmix):
        raise ConfigError(f"{kind.value} is not a category-1 augmentation")
    if n < 2:
        raise PreconditionError(f"{kind.value} needs a batch of at least 2 images")
    alpha = params["alpha"]
    if not alpha > 0:
        raise ConfigError(f"{kind.value} alpha must be positive, got {alpha}")
    partner = rng.permutation(n)

    if kind is AugmentationKind.mixup:
        lam = float(params["lam"]) if "lam" in params else float(rng.beta(alpha, alpha))
        out = lam * out + (1.0 - lam) * out[partner]
        weights[:, 0], weights[:, 1] = lam, 1.0 - lam
        return out, partner, weights

    if "box" in params:
        y0, x0, bh, bw = params["box"]
    else:
        lam = float(rng.beta(alpha, alpha))
        ratio = np.sqrt(1.0 - lam)
        bh, bw = int(h * ratio), int(w * ratio)
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        y0, x0 = np.clip(cy - bh // 2, 0, h), np.clip(cx - bw // 2, 0, w)
        y1, x1 = np.clip(cy + bh // 2, 0, h), np.clip(cx + bw // 2, 0, w)
        bh, bw = y1 - y0, x1 - x0
    out[:, :, y0:y0 + bh, x0:x0 + bw] = batch[partner][:, :, y0:y0 + bh, x0:x0 + bw]
    area = bh * bw / (h * w)
    weights[:, 0], weights[:, 1] = 1.0 - area, area
    return out, partner, weights


def soft_targets(labels, partner, weights, n_classes=2) -> np.ndarray:
    """Per-row target distributions from :func:`category1_augment` output."""
    labels = np.asarray(labels)
    t = np.zeros((len(labels), n_classes))
    rows = np.arange(len(labels))
    np.add.at(t, (rows, labels), weights[:, 0])
    np.add.at(t, (rows, labels[partner]), weights[:, 1])
    return t
