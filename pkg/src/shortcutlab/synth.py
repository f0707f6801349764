"""Procedural multi-shortcut image datasets.

Every image holds a central target glyph (disc or cross), a full-canvas
background field (stripes or checkerboard) and a small co-object on the
right edge (triangle or ring); an optional watermark band can be overlaid.
The background, co-object and watermark are shortcut cues whose agreement
with the target label is controlled per cue by ``rho = P(cue = y | y)``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import RngStream, derive_id

log = logging.getLogger(__name__)

FORMAT_VERSION = "shortcutlab-ds-v1"
CUE_KINDS = ("background", "coobject", "watermark")
SPLITS = ("train", "val", "test")

# sub-stream ids inside a sample's seed
_BG, _GLYPH, _COOBJ, _NOISE, _LABEL = 1, 2, 3, 4, 5

# Palettes.  A cue's class colour is its base plus or minus a class delta,
# scaled per sample by a salience factor drawn from [1 - spread, 1 + spread].
_BG_BASE = (np.array([0.30, 0.30, 0.30]), np.array([0.18, 0.18, 0.18]))  # bright, dark
_BG_DELTA = np.array([0.10, 0.0, -0.10])
_BG_SPREAD = 1.0
_GLYPH_RANGE = (0.20, 1.0)
_GLYPH_TINT = 0.25
_COOBJ_BASE = np.array([0.5, 0.35, 0.5])
_COOBJ_DELTA = np.array([0.35, 0.0, -0.35])
_COOBJ_SPREAD = 1.0


def _salience(rng, spread):
    return 1.0 - spread + 2.0 * spread * rng.uniform()


@dataclass(frozen=True)
class CueSpec:
    name: str
    rho: float = 0.95
    enabled: bool = True


@dataclass(frozen=True)
class DatasetConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    classes: int = 2
    train_per_class: int = 4000
    val_total: int = 500
    test_total: int = 500
    cues: tuple = (CueSpec("background"), CueSpec("coobject"))
    pixel_noise_sigma: float = 0.05
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cues", tuple(
            c if isinstance(c, CueSpec) else CueSpec(**c) for c in self.cues))
        if self.channels != 3:
            raise ConfigError(f"channels must be 3, got {self.channels}")
        if self.classes != 2:
            raise ConfigError(f"classes must be 2, got {self.classes}")
        for fname in ("image_height", "image_width", "train_per_class", "val_total", "test_total"):
            if int(getattr(self, fname)) <= 0:
                raise ConfigError(f"{fname} must be positive, got {getattr(self, fname)}")
        if min(self.image_height, self.image_width) < 16:
            raise ConfigError("images must be at least 16x16 to hold three cues")
        if not self.pixel_noise_sigma >= 0:
            raise ConfigError(f"pixel_noise_sigma must be >= 0, got {self.pixel_noise_sigma}")
        names = [c.name for c in self.cues]
        if len(set(names)) != len(names):
            raise ConfigError(f"cue names must be unique, got {names}")
        for i, c in enumerate(self.cues):
            if c.name not in CUE_KINDS:
                raise ConfigError(f"cues[{i}].name={c.name!r} not one of {CUE_KINDS}")
            if not 0.5 <= c.rho <= 1.0:
                raise ConfigError(f"cues[{i}].rho={c.rho} outside [0.5, 1]")
        for required in ("background", "coobject"):
            if required not in names:
                raise ConfigError(f"cues must include {required!r}")

    @classmethod
    def two_cue(cls, **kw) -> "DatasetConfig":
        return cls(**kw)

    @classmethod
    def watermark(cls, **kw) -> "DatasetConfig":
        kw.setdefault("cues", (CueSpec("background"), CueSpec("coobject"), CueSpec("watermark")))
        return cls(**kw)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        preset = d.pop("preset", "two_cue")
        if preset not in ("two_cue", "watermark"):
            raise ConfigError(f"dataset.preset={preset!r} not one of ('two_cue', 'watermark')")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset fields: {sorted(unknown)}")
        if "cues" in d:
            d["cues"] = tuple(CueSpec(**c) for c in d["cues"])
        return getattr(cls, preset)(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cues"] = [asdict(c) for c in self.cues]
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def cue_names(self) -> tuple:
        return tuple(c.name for c in self.cues)

    @property
    def enabled_cues(self) -> tuple:
        return tuple(c for c in self.cues if c.enabled)

    def cue(self, name) -> CueSpec:
        for c in self.cues:
            if c.name == name:
                return c
        raise KeyError(name)


class GroupKey(NamedTuple):
    """Target class plus one agreement bit per enabled cue (1 = cue equals y)."""

    y: int
    cue_bits: tuple

    def __str__(self):
        return f"y{self.y}_" + "".join(str(b) for b in self.cue_bits)

    @classmethod
    def parse(cls, s: str) -> "GroupKey":
        head, bits = s.split("_")
        return cls(int(head[1:]), tuple(int(b) for b in bits))


def all_group_keys(n_cues: int) -> list:
    """Every group key, bits listed common-first (1 before 0)."""
    return [GroupKey(y, bits) for y in (0, 1)
            for bits in itertools.product((1, 0), repeat=n_cues)]


def _largest_remainder(expected: dict, total: int) -> dict:
    """Round ``expected`` counts to integers summing to ``total``.

    Ties on the fractional part prefer groups with an even number of
    disagreeing cues, then the common-first key order; for two cues this
    keeps every per-cue marginal as close to its expectation as possible.
    """
    keys = list(expected)
    floors = {k: int(np.floor(expected[k] + 1e-9)) for k in keys}
    missing = total - sum(floors.values())
    order = sorted(
        range(len(keys)),
        key=lambda i: (
            -round(expected[keys[i]] - floors[keys[i]], 9),
            sum(1 - b for b in keys[i].cue_bits) % 2,
            i,
        ),
    )
    for i in order[:missing]:
        floors[keys[i]] += 1
    return floors


def plan_group_counts(config: DatasetConfig, split: str) -> dict:
    """Per-group sample counts for ``split`` under the independence model.

    The expected count of a group is ``n_class * prod(rho or 1 - rho)``;
    val/test use ``rho = 0.5`` for every cue.
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    cues = config.enabled_cues
    if split == "train":
        per_class = [config.train_per_class] * 2
    else:
        total = config.val_total if split == "val" else config.test_total
        per_class = [total - total // 2, total // 2]
    plan = {}
    for y in (0, 1):
        expected = {}
        for key in all_group_keys(len(cues)):
            if key.y != y:
                continue
            p = 1.0
            for cue, bit in zip(cues, key.cue_bits):
                rho = cue.rho if split == "train" else 0.5
                p *= rho if bit else 1.0 - rho
            expected[key] = per_class[y] * p
        plan.update(_largest_remainder(expected, per_class[y]))
    if split == "train" and any(c.rho == 1.0 for c in cues):
        log.warning("rho=1 leaves minority groups empty in the train split")
    return plan


# ---------------------------------------------------------------------------
# rendering


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    y: int
    cue_labels: dict
    target_mask: np.ndarray  # (H, W) bool
    coobject_mask: np.ndarray  # (H, W) bool
    group: GroupKey
    sample_seed: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.y == other.y
            and self.cue_labels == other.cue_labels
            and self.group == other.group
            and self.sample_seed == other.sample_seed
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.target_mask, other.target_mask)
            and np.array_equal(self.coobject_mask, other.coobject_mask)
        )


@lru_cache(maxsize=8)
def _geometry(h: int, w: int):
    """Static masks and anchors for one canvas size."""
    rows, cols = np.mgrid[0:h, 0:w]
    side = int(round(0.5 * min(h, w)))
    ty, tx = (h - side) // 2, (w - side) // 2
    cy, cx = ty + side / 2.0, tx + side / 2.0
    yy, xx = rows + 0.5 - cy, cols + 0.5 - cx
    in_box = (rows >= ty) & (rows < ty + side) & (cols >= tx) & (cols < tx + side)
    disc = yy**2 + xx**2 <= (side / 2.0) ** 2
    arm = side / 6.0
    cross = in_box & ((np.abs(yy) < arm) | (np.abs(xx) < arm))

    co = int(round(0.25 * min(h, w)))
    oy, ox = (h - co) // 2, w - co
    if ox < tx + side:
        raise ConfigError("canvas too narrow to keep target and co-object apart")
    oyy = rows + 0.5 - (oy + co / 2.0)
    oxx = cols + 0.5 - (ox + co / 2.0)
    o_box = (rows >= oy) & (rows < oy + co) & (cols >= ox) & (cols < ox + co)
    # apex at the top, base on the bottom row of the box
    frac = (rows + 1 - oy) / co
    triangle = o_box & (np.abs(oxx) <= frac * co / 2.0)
    rad = np.sqrt(oyy**2 + oxx**2)
    ring = o_box & (rad <= co / 2.0) & (rad >= co / 2.0 - max(1.0, co / 6.0))
    return {
        "rows": rows,
        "cols": cols,
        "glyph": {0: disc, 1: cross},
        "coobject": {0: triangle, 1: ring},
        "coobject_box": o_box,
    }


def render_background(label: int, sample_seed: int, config: DatasetConfig, noisy: bool = True) -> np.ndarray:
    """Background field alone, ``(C, H, W)`` float32.

    With ``noisy`` the sample's pixel noise is added and the result clipped,
    which equals the rendered image wherever no other cue is painted.
    """
    canvas = _background_canvas(label, sample_seed, config)
    if noisy:
        canvas = _add_noise(canvas, sample_seed, config)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def _background_canvas(label, sample_seed, config):
    h = config.image_height
    g = _geometry(h, config.image_width)
    rng = RngStream(sample_seed, _BG)
    sign = 1.0 if label == 0 else -1.0
    sal = _salience(rng, _BG_SPREAD)
    mid, half = (_BG_BASE[0] + _BG_BASE[1]) / 2, (_BG_BASE[0] - _BG_BASE[1]) / 2
    contrast = half * sal
    hi, lo = mid + contrast + sign * sal * _BG_DELTA, mid - contrast + sign * sal * _BG_DELTA
    shift = rng.uniform() * 0.16 - 0.08
    if label == 0:
        width = max(1, h // 16)
        phase = int(rng.integers(0, 2 * width))
        pattern = ((g["rows"] + phase) // width) % 2
    else:
        cell = max(1, h // 8)
        py, px = rng.integers(0, 2 * cell, size=2)
        pattern = ((g["rows"] + py) // cell + (g["cols"] + px) // cell) % 2
    return np.where(pattern[None] == 0, hi[:, None, None], lo[:, None, None]) + shift


def _add_noise(canvas, sample_seed, config):
    if config.pixel_noise_sigma == 0:
        return canvas
    noise = RngStream(sample_seed, _NOISE).normal(canvas.shape)
    return canvas + config.pixel_noise_sigma * noise


def render_sample(y: int, cue_labels: dict, sample_seed: int, config: DatasetConfig) -> Sample:
    """Deterministically render one sample from its labels and seed."""
    from .augment import EVAL_WATERMARK, overlay_watermark

    h, w = config.image_height, config.image_width
    g = _geometry(h, w)
    b, c = int(cue_labels["background"]), int(cue_labels["coobject"])
    canvas = _background_canvas(b, sample_seed, config)

    glyph = g["glyph"][int(y)]
    lo, hi = _GLYPH_RANGE
    u = RngStream(sample_seed, _GLYPH).uniform(4)
    color = (lo + (hi - lo) * u[0]) * (1.0 - _GLYPH_TINT + _GLYPH_TINT * u[1:])
    canvas[:, glyph] = color[:, None]

    co_mask = g["coobject"][c]
    co_rng = RngStream(sample_seed, _COOBJ)
    sign = 1.0 if c == 0 else -1.0
    co_color = _COOBJ_BASE + sign * _salience(co_rng, _COOBJ_SPREAD) * _COOBJ_DELTA
    co_color = np.clip(co_color + co_rng.uniform(3) * 0.1 - 0.05, 0.0, 1.0)
    canvas[:, co_mask] = co_color[:, None]

    if "watermark" in cue_labels and _watermark_on(config) and int(cue_labels["watermark"]) == 0:
        canvas = overlay_watermark(canvas, EVAL_WATERMARK)

    image = np.clip(_add_noise(canvas, sample_seed, config), 0.0, 1.0).astype(np.float32)
    return Sample(
        image=image,
        y=int(y),
        cue_labels={k: int(v) for k, v in cue_labels.items()},
        target_mask=glyph.copy(),
        coobject_mask=co_mask.copy(),
        group=group_of(int(y), cue_labels, config),
        sample_seed=int(sample_seed),
    )


def _watermark_on(config):
    return "watermark" in config.cue_names and config.cue("watermark").enabled


def group_of(y: int, cue_labels: dict, config: DatasetConfig) -> GroupKey:
    return GroupKey(int(y), tuple(int(int(cue_labels[c.name]) == y) for c in config.enabled_cues))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Split:
    """Column-oriented storage of one split."""

    name: str
    config: DatasetConfig
    images: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int64
    cue_labels: np.ndarray  # (N, n_cues) int64, columns follow config.cues
    target_mask: np.ndarray  # (N, H, W) bool
    coobject_mask: np.ndarray  # (N, H, W) bool
    sample_seed: np.ndarray  # (N,) uint64
    _backgrounds: np.ndarray = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.y)

    def cue(self, name) -> np.ndarray:
        return self.cue_labels[:, self.config.cue_names.index(name)]

    def agreement_bits(self, cue_names=None) -> np.ndarray:
        """``(N, k)`` 0/1 matrix: does each named cue agree with ``y``."""
        names = [c.name for c in self.config.enabled_cues] if cue_names is None else list(cue_names)
        if not names:
            return np.zeros((len(self), 0), dtype=np.int64)
        return np.stack([(self.cue(n) == self.y).astype(np.int64) for n in names], axis=1)

    def group_keys(self, cue_names=None) -> list:
        bits = self.agreement_bits(cue_names)
        return [GroupKey(int(y), tuple(int(v) for v in row)) for y, row in zip(self.y, bits)]

    def group_counts(self, cue_names=None) -> dict:
        counts = {}
        for k in self.group_keys(cue_names):
            counts[k] = counts.get(k, 0) + 1
        return counts

    def __getitem__(self, i) -> Sample:
        labels = {n: int(self.cue_labels[i, j]) for j, n in enumerate(self.config.cue_names)}
        return Sample(
            image=self.images[i],
            y=int(self.y[i]),
            cue_labels=labels,
            target_mask=self.target_mask[i],
            coobject_mask=self.coobject_mask[i],
            group=group_of(int(self.y[i]), labels, self.config),
            sample_seed=int(self.sample_seed[i]),
        )

    def subset(self, index) -> "Split":
        index = np.asarray(index, dtype=np.int64)
        bg = None if self._backgrounds is None else self._backgrounds[index]
        return Split(self.name, self.config, self.images[index], self.y[index],
                     self.cue_labels[index], self.target_mask[index],
                     self.coobject_mask[index], self.sample_seed[index], bg)

    def backgrounds(self) -> np.ndarray:
        """Noisy background-only renders of every sample (cached)."""
        if self._backgrounds is None:
            b = self.cue("background")
            self._backgrounds = np.stack([
                render_background(int(b[i]), int(self.sample_seed[i]), self.config)
                for i in range(len(self))
            ]) if len(self) else np.zeros((0,) + self.images.shape[1:], np.float32)
        return self._backgrounds

    @classmethod
    def from_samples(cls, name, config, samples) -> "Split":
        names = config.cue_names
        return cls(
            name=name,
            config=config,
            images=np.stack([s.image for s in samples]).astype(np.float32),
            y=np.array([s.y for s in samples], dtype=np.int64),
            cue_labels=np.array([[s.cue_labels[n] for n in names] for s in samples], dtype=np.int64),
            target_mask=np.stack([s.target_mask for s in samples]).astype(bool),
            coobject_mask=np.stack([s.coobject_mask for s in samples]).astype(bool),
            sample_seed=np.array([s.sample_seed for s in samples], dtype=np.uint64),
        )


@dataclass
class Dataset:
    config: DatasetConfig
    train: Split
    val: Split
    test: Split

    def split(self, name) -> Split:
        return getattr(self, name)

    def with_train(self, train: Split) -> "Dataset":
        return Dataset(self.config, train, self.val, self.test)

    def train_group_frequencies(self) -> dict:
        """Normalized train-split group frequencies (I.D. Acc weights)."""
        counts = self.train.group_counts()
        n = sum(counts.values())
        return {k: v / n for k, v in counts.items()}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in SPLITS:
            h.update(_records(self.split(s)).tobytes())
        return h.hexdigest()


def _split_labels(config, split_name):
    """Label rows ``(y, cue labels)`` in plan order."""
    plan = plan_group_counts(config, split_name)
    enabled = [c.name for c in config.enabled_cues]
    rows = []
    for key in all_group_keys(len(enabled)):
        for _ in range(plan.get(key, 0)):
            labels = {}
            for name, bit in zip(enabled, key.cue_bits):
                labels[name] = key.y if bit else 1 - key.y
            rows.append((key.y, labels))
    return rows


def generate_split(config: DatasetConfig, split_name: str) -> Split:
    split_id = SPLITS.index(split_name)
    rows = _split_labels(config, split_name)
    order = RngStream(config.master_seed, derive_id("shuffle", split_id)).permutation(len(rows))
    samples = []
    for i, j in enumerate(order):
        y, labels = rows[j]
        seed = derive_id(config.master_seed, split_id, i)
        labels = dict(labels)
        for c in config.cues:
            if c.name not in labels:
                # disabled cues are independent of the target
                labels[c.name] = int(RngStream(seed, _LABEL).uniform() < 0.5)
        samples.append(render_sample(y, labels, seed, config))
    return Split.from_samples(split_name, config, samples)


def generate_dataset(config: DatasetConfig) -> Dataset:
    return Dataset(config, *(generate_split(config, s) for s in SPLITS))


# ---------------------------------------------------------------------------
# serialization


def _record_dtype(config: DatasetConfig) -> np.dtype:
    c, h, w = config.channels, config.image_height, config.image_width
    return np.dtype([
        ("image", "<f4", (c, h, w)),
        ("target_mask", "u1", (h, w)),
        ("coobject_mask", "u1", (h, w)),
        ("y", "<i4"),
        ("cue_labels", "<i4", (len(config.cues),)),
        ("sample_seed", "<u8"),
    ])


def _records(split: Split) -> np.ndarray:
    rec = np.zeros(len(split), dtype=_record_dtype(split.config))
    rec["image"] = split.images
    rec["target_mask"] = split.target_mask
    rec["coobject_mask"] = split.coobject_mask
    rec["y"] = split.y
    rec["cue_labels"] = split.cue_labels
    rec["sample_seed"] = split.sample_seed
    return rec


@dataclass
class Manifest:
    format_version: str
    config: dict
    split_sizes: dict
    group_counts: dict  # split -> {group key string: count}
    content_hash: str
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def build_manifest(dataset: Dataset) -> Manifest:
    return Manifest(
        format_version=FORMAT_VERSION,
        config=dataset.config.to_dict(),
        split_sizes={s: len(dataset.split(s)) for s in SPLITS},
        group_counts={
            s: {str(k): v for k, v in sorted(dataset.split(s).group_counts().items())}
            for s in SPLITS
        },
        content_hash=dataset.content_hash(),
        config_hash=dataset.config.config_hash(),
    )


def write_dataset(dataset: Dataset, path) -> Manifest:
    """Write ``manifest.json`` and the little-endian ``samples.bin`` payload."""
    os.makedirs(path, exist_ok=True)
    manifest = build_manifest(dataset)
    with open(os.path.join(path, "samples.bin"), "wb") as f:
        for s in SPLITS:
            f.write(_records(dataset.split(s)).tobytes())
    with open(os.path.join(path, "manifest.json"), "w") as f:
        f.write(manifest.to_json())
    return manifest


def read_manifest(path) -> Manifest:
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest.json is not valid JSON: {e}") from None
    if raw.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"version mismatch: expected {FORMAT_VERSION}, found {raw.get('format_version')!r}"
        )
    return Manifest(**raw)


def read_dataset(path) -> Dataset:
    manifest = read_manifest(path)
    config = DatasetConfig.from_dict(manifest.config)
    dtype = _record_dtype(config)
    try:
        with open(os.path.join(path, "samples.bin"), "rb") as f:
            payload = f.read()
    except FileNotFoundError:
        raise FormatError(f"no samples.bin in {path}") from None
    expected = sum(manifest.split_sizes[s] for s in SPLITS) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {len(payload)}")
    h = hashlib.sha256(payload).hexdigest()
    if h != manifest.content_hash:
        raise FormatError(f"hash mismatch: manifest {manifest.content_hash[:12]}, payload {h[:12]}")
    rec = np.frombuffer(payload, dtype=dtype)
    splits, start = [], 0
    for s in SPLITS:
        n = manifest.split_sizes[s]
        r = rec[start:start + n]
        start += n
        splits.append(Split(
            name=s,
            config=config,
            images=r["image"].astype(np.float32),
            y=r["y"].astype(np.int64),
            cue_labels=r["cue_labels"].astype(np.int64).reshape(n, len(config.cues)),
            target_mask=r["target_mask"].astype(bool),
            coobject_mask=r["coobject_mask"].astype(bool),
            sample_seed=r["sample_seed"].astype(np.uint64),
        ))
    ds = Dataset(config, *splits)
    for s in SPLITS:
        recount = {str(k): v for k, v in ds.split(s).group_counts().items()}
        if recount != manifest.group_counts[s]:
            raise FormatError(f"manifest group counts disagree with payload in split {s!r}")
    return ds
