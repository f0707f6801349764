"""Shortcut-mitigation methods and the shared training protocol.

All trainers run minibatch SGD over a deterministic per-epoch shuffle,
evaluate the validation split after every ``eval_every`` epochs and keep the
snapshot with the best validation worst-group accuracy.  A trainer with its
mechanism switched off follows the ERM trajectory bit for bit.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import CATEGORY1, TARGETED, AugmentationKind, AugmentationPool, category1_augment, soft_targets
from .errors import ConfigError, PreconditionError, TrainingError
from .metrics import PredictionTable, cue_alignment
from .model import (
    DEFAULT_HIDDEN,
    HeadTrainer,
    ModelParams,
    apply_sgd,
    extractor_backward,
    extractor_forward,
    flatten_images,
    forward_features,
    init_params,
    lle_predict,
    lle_training_step,
)
from .numerics import (
    LayerParams,
    RngStream,
    cross_entropy_per_sample,
    dense_affine,
    dense_affine_backward,
    derive_id,
    generalized_cross_entropy,
    softmax,
    softmax_cross_entropy,
    soft_target_cross_entropy,
)

# plain SGD without a pretrained backbone needs a larger step at desk scale
DESK_LR = 3e-2

METHOD_KINDS = (
    "erm", "mixup", "cutout", "cutmix", "wmk_aug", "bg_aug", "coobj_aug", "txt_aug",
    "gdro", "di", "subg", "dfr", "jtt", "lff", "lle",
)
LABELED_KINDS = ("gdro", "di", "subg", "dfr")
TARGETED_METHODS = {
    "wmk_aug": AugmentationKind.watermark_random,
    "bg_aug": AugmentationKind.background_swap,
    "coobj_aug": AugmentationKind.coobject_swap,
    "txt_aug": AugmentationKind.texture_randomize,
}
DEFAULT_METHOD_PARAMS = {
    "mixup": {"alpha": 0.2},
    "cutout": {"p": 0.1},
    "cutmix": {"alpha": 1.0},
    "gdro": {"eta": 0.01, "gamma": 0.1},
    "di": {"inference": "sum"},
    "jtt": {"E": 1, "lambda_up": 100.0},
    "lff": {"q": 0.7},
    "lle": {
        "kinds": ["background_swap", "coobject_swap"],
        "lambda_shift": 1.0,
        "stop_gradient": True,
        "aggregation": "dynamic",
        "ensemble": True,
    },
}


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    params: dict = field(default_factory=dict)
    shortcut_labels_used: tuple = ()
    name: str | None = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}; expected one of {METHOD_KINDS}")
        object.__setattr__(self, "shortcut_labels_used", tuple(self.shortcut_labels_used))
        defaults = DEFAULT_METHOD_PARAMS.get(self.kind, {})
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"{self.kind}: unknown params {sorted(unknown)}")
        object.__setattr__(self, "params", {**defaults, **self.params})
        if self.kind in LABELED_KINDS and not self.shortcut_labels_used:
            raise ConfigError(f"{self.kind} needs a non-empty shortcut_labels_used")
        if self.kind not in LABELED_KINDS and self.shortcut_labels_used:
            raise ConfigError(f"{self.kind} does not use shortcut labels")
        if len(set(self.shortcut_labels_used)) != len(self.shortcut_labels_used):
            raise ConfigError(f"duplicate shortcut labels: {self.shortcut_labels_used}")
        if self.kind == "jtt" and int(self.params["E"]) < 1:
            raise ConfigError(f"jtt E must be >= 1, got {self.params['E']}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.shortcut_labels_used:
            return f"{self.kind}[{'+'.join(self.shortcut_labels_used)}]"
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params,
                "shortcut_labels_used": list(self.shortcut_labels_used), "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        d = dict(d)
        unknown = set(d) - {"kind", "params", "shortcut_labels_used", "name"}
        if unknown:
            raise ConfigError(f"unknown method fields: {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("method entry needs a 'kind'")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 300
    seeds: tuple = (0, 1, 2, 3, 4, 5)
    eval_every: int = 1
    hidden: tuple = DEFAULT_HIDDEN

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("batch_size", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if not self.seeds:
            raise ConfigError("train.seeds must not be empty")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f"train.hidden must list positive widths, got {self.hidden}")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 60, "seeds": (0, 1, 2), "lr": DESK_LR, **kw})

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def from_dict(cls, d: dict, profile: str = "full") -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        if profile not in ("desk", "full"):
            raise ConfigError(f"profile={profile!r} not one of ('desk', 'full')")
        return getattr(cls, profile)(**d)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "batch_size": self.batch_size,
                "epochs": self.epochs, "seeds": list(self.seeds), "eval_every": self.eval_every,
                "hidden": list(self.hidden)}


# ---------------------------------------------------------------------------
# prediction and per-epoch evaluation


@dataclass(frozen=True)
class Predictor:
    """How a trained model turns images into class probabilities."""

    kind: str = "head"  # head | lle | di
    mode: str = "dynamic"

    def probs(self, params: ModelParams, images) -> np.ndarray:
        feats = forward_features(params, images)
        return self.probs_from_features(params, feats)

    def probs_from_features(self, params, feats) -> np.ndarray:
        if self.kind == "head":
            return softmax(dense_affine(feats, params.heads[params.head_names[0]]))
        if self.kind == "lle":
            return lle_predict(params, None, self.mode, feats=feats)[0]
        if self.kind == "di":
            return softmax(di_logits(params, feats, self.mode))
        raise ConfigError(f"unknown predictor kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "mode": self.mode}


def _batched_probs(predictor, params, images, chunk=1024):
    out = [predictor.probs(params, images[i:i + chunk]) for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def predict_table(params, predictor: Predictor, split) -> PredictionTable:
    return PredictionTable.from_split(split, _batched_probs(predictor, params, split.images))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_tallies: dict  # GroupKey over all enabled cues -> (correct, total)
    alignment: dict
    param_hash: str

    def worst_group(self, label_subset, cue_order) -> float:
        return worst_group_from_tallies(self.val_tallies, label_subset, cue_order)


def worst_group_from_tallies(tallies: dict, label_subset, cue_order) -> float:
    """Worst-group accuracy over the groups induced by ``label_subset``
    (pooling the full-key tallies over the other cues)."""
    idx = [list(cue_order).index(c) for c in label_subset]
    pooled = {}
    for key, (c, n) in tallies.items():
        k = (key.y, tuple(key.cue_bits[i] for i in idx))
        pc, pn = pooled.get(k, (0, 0))
        pooled[k] = (pc + c, pn + n)
    return min(c / n for c, n in pooled.values() if n)


def select_early_stop(history, label_subset, cue_order=None) -> int:
    """Epoch with the highest validation worst-group accuracy; ties go to
    the earliest epoch.  ``history`` is a list of :class:`EpochRecord` or of
    ``(epoch, score)`` pairs."""
    if not history:
        raise PreconditionError("select_early_stop needs at least one recorded epoch")
    best_epoch, best = None, -math.inf
    for rec in history:
        if isinstance(rec, EpochRecord):
            epoch, score = rec.epoch, rec.worst_group(label_subset, cue_order)
        else:
            epoch, score = rec
        if score > best:
            best_epoch, best = epoch, score
    return best_epoch


@dataclass
class TrainResult:
    params: ModelParams  # selected snapshot
    final_params: ModelParams
    selected_epoch: int
    history: list
    trajectory_hash: str
    predictor: Predictor = field(default_factory=Predictor)
    label_subset: tuple = ()
    extras: dict = field(default_factory=dict)

    def dynamics(self) -> list:
        """``(epoch, target, background, coobject)`` alignment rows."""
        return [(r.epoch, r.alignment.get("target"), r.alignment.get("background"),
                 r.alignment.get("coobject")) for r in self.history]


def _evaluate_val(params, predictor, val):
    table = predict_table(params, predictor, val)
    tallies = {}
    for key, ok in zip(table.group_keys(), table.correct()):
        c, n = tallies.get(key, (0, 0))
        tallies[key] = (c + int(ok), n + 1)
    labels = {"target": val.y, "background": val.cue("background"), "coobject": val.cue("coobject")}
    return dict(sorted(tallies.items())), cue_alignment(table.pred, labels)


def _fit(dataset, config: TrainConfig, seed, params, step, *, n_train, label_subset,
         predictor=None, epochs=None):
    """Shared epoch loop.  ``step(params, index, rng) -> (params, loss)``."""
    predictor = predictor or Predictor()
    epochs = config.epochs if epochs is None else int(epochs)
    run = RngStream(seed, derive_id("run"))
    cue_order = [c.name for c in dataset.config.enabled_cues]
    history = []
    traj = hashlib.sha256(params.param_hash().encode())
    best, best_score, best_epoch = params, -math.inf, 0
    for epoch in range(1, epochs + 1):
        order = run.child("shuffle", epoch).permutation(n_train)
        losses = []
        for b, start in enumerate(range(0, n_train, config.batch_size)):
            index = order[start:start + config.batch_size]
            params, loss = step(params, index, run.child("step", epoch, b))
            if not math.isfinite(loss):
                raise _diverged(epoch, b, loss)
            losses.append(loss)
        phash = params.param_hash()
        traj.update(phash.encode())
        if epoch % config.eval_every == 0 or epoch == epochs:
            tallies, align = _evaluate_val(params, predictor, dataset.val)
            rec = EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0, tallies, align, phash)
            history.append(rec)
            score = rec.worst_group(label_subset, cue_order)
            if score > best_score:
                best, best_score, best_epoch = params, score, epoch
    return TrainResult(best, params, best_epoch, history, traj.hexdigest(), predictor, tuple(label_subset))


def _diverged(epoch, batch, loss):
    return TrainingError(f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")


def _all_cues(dataset):
    return tuple(c.name for c in dataset.config.enabled_cues)


def _init(dataset, config, seed, head_names=("identity",)):
    dim = int(np.prod(dataset.train.images.shape[1:]))
    return init_params(dim, head_names, RngStream(seed, derive_id("init")), config.hidden)


def _batch_x(split, index):
    return flatten_images(split.images[index])


def ce_step(params, x, y, weights, lr, wd, head=None, train_extractor=True):
    """One SGD step of (weighted) cross-entropy on one head."""
    head = params.head_names[0] if head is None else head
    feats, cache = extractor_forward(params, x)
    layer = params.heads[head]
    loss, dlogits = softmax_cross_entropy(dense_affine(feats, layer), y, weights)
    return _backprop_head(params, cache, feats, head, dlogits, lr, wd, train_extractor), loss


def _backprop_head(params, cache, feats, head, dlogits, lr, wd, train_extractor=True):
    layer = params.heads[head]
    grads = params.zeros_like()
    dx, dw, db = dense_affine_backward(feats, layer, dlogits, need_input=train_extractor)
    grads.heads[head] = LayerParams(dw, db)
    if train_extractor:
        grads.extractor = extractor_backward(params, cache, dx)
    return apply_sgd(params, grads, lr, wd, train_extractor=train_extractor)


# ---------------------------------------------------------------------------
# category 0/1: ERM and generic augmentation


def train_erm(dataset, config: TrainConfig, seed: int = 0, *, sample_weights=None, epochs=None,
              label_subset=None, init: ModelParams | None = None) -> TrainResult:
    train = dataset.train
    y = train.y
    w = None if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    params = _init(dataset, config, seed) if init is None else init

    def step(p, index, rng):
        return ce_step(p, _batch_x(train, index), y[index], None if w is None else w[index],
                       config.lr, config.weight_decay)

    subset = _all_cues(dataset) if label_subset is None else label_subset
    return _fit(dataset, config, seed, params, step, n_train=len(train), label_subset=subset,
                epochs=epochs)


def train_category1(dataset, config, seed, kind, params=None) -> TrainResult:
    """ERM on mixup, cutout or cutmix batches with soft two-label targets."""
    kind = AugmentationKind(kind)
    if kind not in CATEGORY1:
        raise ConfigError(f"{kind.value} is not a category-1 augmentation")
    train = dataset.train

    def step(p, index, rng):
        images, y = train.images[index], train.y[index]
        if len(index) < 2 and kind is not AugmentationKind.cutout:
            return ce_step(p, flatten_images(images), y, None, config.lr, config.weight_decay)
        out, partner, weights = category1_augment(kind, images, y, rng.child("augment"), params)
        feats, cache = extractor_forward(p, flatten_images(out))
        head = p.head_names[0]
        loss, dlogits = soft_target_cross_entropy(dense_affine(feats, p.heads[head]),
                                                  soft_targets(y, partner, weights))
        return _backprop_head(p, cache, feats, head, dlogits, config.lr, config.weight_decay), loss

    return _fit(dataset, config, seed, _init(dataset, config, seed), step,
                n_train=len(train), label_subset=_all_cues(dataset))


def targeted_aug_training(dataset, config, seed, kinds=()) -> TrainResult:
    """ERM where a random half of every batch passes through one of ``kinds``.

    With no kinds this is exactly ERM.
    """
    kinds = [AugmentationKind(k) for k in kinds]
    bad = [k.value for k in kinds if k not in TARGETED]
    if bad:
        raise ConfigError(f"not targeted augmentations: {bad}")
    train = dataset.train
    pool = AugmentationPool(train)

    def step(p, index, rng):
        x = _batch_x(train, index)
        if kinds:
            pick = rng.child("half").permutation(len(index))[: len(index) // 2]
            which = rng.child("kind").categorical(np.ones(len(kinds)), size=len(pick))
            for d, kind in enumerate(kinds):
                sel = pick[which == d]
                if len(sel):
                    imgs, _ = pool.apply(kind, index[sel], rng.child("augment", d))
                    x[sel] = flatten_images(imgs)
        return ce_step(p, x, train.y[index], None, config.lr, config.weight_decay)

    return _fit(dataset, config, seed, _init(dataset, config, seed), step,
                n_train=len(train), label_subset=_all_cues(dataset))


# ---------------------------------------------------------------------------
# category 3: methods using shortcut labels


def group_index(split, label_subset):
    """Dense group ids over ``(y, agreement bits of label_subset)``.

    Returns ``(ids, keys)`` where ``keys[i]`` is the GroupKey of id ``i``;
    only groups present in ``split`` get an id.
    """
    keys = split.group_keys(label_subset)
    uniq = sorted(set(keys))
    lookup = {k: i for i, k in enumerate(uniq)}
    return np.array([lookup[k] for k in keys], dtype=np.int64), uniq


def gdro_q_update(q, group_loss, present, eta) -> np.ndarray:
    """Multiplicative-weights step on the groups present in the batch."""
    q = np.array(q, dtype=np.float64)
    q[present] = q[present] * np.exp(eta * np.asarray(group_loss)[present])
    return q / q.sum()


def train_gdro(dataset, config, seed, label_subset, eta=0.01, gamma=0.1) -> TrainResult:
    """Group DRO with multiplicative group weights and size-adjusted losses."""
    if eta < 0 or gamma < 0:
        raise ConfigError(f"gdro eta and gamma must be >= 0 (eta={eta}, gamma={gamma})")
    train = dataset.train
    gid, keys = group_index(train, label_subset)
    n_groups = len(keys)
    n_g = np.bincount(gid, minlength=n_groups).astype(np.float64)
    adjust = gamma / np.sqrt(n_g)
    q = np.full(n_groups, 1.0 / n_groups)
    q_history = [q.copy()]

    def step(p, index, rng):
        nonlocal q
        feats, cache = extractor_forward(p, _batch_x(train, index))
        head = p.head_names[0]
        logits = dense_affine(feats, p.heads[head])
        y = train.y[index]
        g = gid[index]
        ce = cross_entropy_per_sample(logits, y)
        counts = np.bincount(g, minlength=n_groups)
        present = counts > 0
        sums = np.bincount(g, weights=ce, minlength=n_groups)
        group_loss = np.zeros(n_groups)
        group_loss[present] = sums[present] / counts[present]
        adjusted = group_loss + adjust
        q = gdro_q_update(q, adjusted, present, eta)
        q_history.append(q.copy())
        w = q[g] / counts[g]
        mass = float(q[present].sum())
        _, dlogits = softmax_cross_entropy(logits, y, w)
        dlogits = dlogits * mass
        loss = float((q[present] * adjusted[present]).sum())
        return _backprop_head(p, cache, feats, head, dlogits, config.lr, config.weight_decay), loss

    result = _fit(dataset, config, seed, _init(dataset, config, seed), step,
                  n_train=len(train), label_subset=tuple(label_subset))
    result.extras.update(q_history=q_history, groups=[str(k) for k in keys])
    return result


def subsample_groups(split, label_subset, rng: RngStream) -> np.ndarray:
    """Row indices downsampling every group to the smallest group's size.

    Indices come back sorted, so a balanced split maps onto itself.
    """
    gid, keys = group_index(split, label_subset)
    expected = 2 ** (len(label_subset) + 1)
    if len(keys) < expected:
        raise PreconditionError(
            f"subsampling needs every group non-empty; found {len(keys)} of {expected}")
    m = int(np.bincount(gid).min())
    picks = []
    for i in range(len(keys)):
        members = np.flatnonzero(gid == i)
        picks.append(members[rng.child("group", i).permutation(len(members))[:m]])
    return np.sort(np.concatenate(picks))


def train_subg(dataset, config, seed, label_subset, *, init=None, freeze_extractor=False) -> TrainResult:
    """ERM on a group-balanced subsample (SUBG); with a frozen extractor
    only the heads train, which is last-layer retraining."""
    index = subsample_groups(dataset.train, label_subset, RngStream(seed, derive_id("subsample")))
    sub = dataset.with_train(dataset.train.subset(index))
    params = _init(dataset, config, seed) if init is None else init
    if not freeze_extractor:
        result = train_erm(sub, config, seed, label_subset=tuple(label_subset), init=params)
    else:
        feats = forward_features(params, sub.train.images)
        y = sub.train.y

        def step(p, idx, rng):
            trainer = HeadTrainer(p, frozen=True)
            loss = trainer.step(labels=y[idx], feats=feats[idx], lr=config.lr,
                                weight_decay=config.weight_decay)
            return trainer.params, loss

        result = _fit(sub, config, seed, params, step, n_train=len(y),
                      label_subset=tuple(label_subset))
    result.extras["subsample"] = index
    return result


def retrain_dfr(erm_params: ModelParams, dataset, config, seed, label_subset) -> TrainResult:
    """Retrain ERM's last layer on a group-balanced subsample."""
    return train_subg(dataset, config, seed, label_subset, init=erm_params.copy(), freeze_extractor=True)


def domain_index(split, label_subset) -> np.ndarray:
    """Domain id from the raw cue labels of ``label_subset`` (big-endian bits)."""
    d = np.zeros(len(split), dtype=np.int64)
    for name in label_subset:
        d = 2 * d + split.cue(name)
    return d


def di_logits(params, feats, mode="sum") -> np.ndarray:
    logits = [dense_affine(feats, params.heads[n]) for n in params.head_names]
    total = np.sum(logits, axis=0)
    if mode == "sum":
        return total
    if mode == "mean":
        return total / len(logits)
    raise ConfigError(f"di inference must be 'sum' or 'mean', got {mode!r}")


def train_di(dataset, config, seed, label_subset, inference="sum") -> TrainResult:
    """Domain-independent training: one head per shortcut domain."""
    train = dataset.train
    n_dom = 2 ** len(label_subset)
    dom = domain_index(train, label_subset)
    names = [f"domain_{i}" for i in range(n_dom)]
    params = _init(dataset, config, seed, names)

    def step(p, index, rng):
        feats, cache = extractor_forward(p, _batch_x(train, index))
        d = dom[index]
        logits = np.empty((len(index), 2))
        for i, n in enumerate(names):
            sel = np.flatnonzero(d == i)
            logits[sel] = dense_affine(feats[sel], p.heads[n])
        loss, dlogits = softmax_cross_entropy(logits, train.y[index])
        grads = p.zeros_like()
        dfeat = np.zeros_like(feats)
        for i, n in enumerate(names):
            sel = np.flatnonzero(d == i)
            dx, dw, db = dense_affine_backward(feats[sel], p.heads[n], dlogits[sel])
            grads.heads[n] = LayerParams(dw, db)
            dfeat[sel] = dx
        grads.extractor = extractor_backward(p, cache, dfeat)
        return apply_sgd(p, grads, config.lr, config.weight_decay), loss

    result = _fit(dataset, config, seed, params, step, n_train=len(train),
                  label_subset=tuple(label_subset), predictor=Predictor("di", inference))
    result.extras["n_domains"] = n_dom
    return result


def predict_di(params, images, inference="sum") -> np.ndarray:
    return di_logits(params, forward_features(params, images), inference).argmax(axis=1)


# ---------------------------------------------------------------------------
# category 4: inferred shortcut labels


def jtt_error_set(reference: ModelParams, split) -> np.ndarray:
    """Boolean mask of the training rows the reference model gets wrong."""
    return _batched_probs(Predictor(), reference, split.images).argmax(axis=1) != split.y


def jtt_weights(reference: ModelParams, split, lambda_up) -> np.ndarray:
    return np.where(jtt_error_set(reference, split), float(lambda_up), 1.0)


def train_jtt(dataset, config, seed, E=1, lambda_up=100.0) -> TrainResult:
    """Just Train Twice: upweight the training errors of a short ERM run."""
    if int(E) < 1:
        raise ConfigError(f"jtt E must be >= 1, got {E}")
    if lambda_up < 0:
        raise ConfigError(f"jtt lambda_up must be >= 0, got {lambda_up}")
    reference = train_erm(dataset, config, seed, epochs=int(E)).final_params
    errors = jtt_error_set(reference, dataset.train)
    result = train_erm(dataset, config, seed, sample_weights=np.where(errors, float(lambda_up), 1.0))
    result.extras["error_set"] = np.flatnonzero(errors)
    return result


def lff_weights(loss_bias, loss_debiased) -> np.ndarray:
    """``L_B / (L_B + L_D)`` per sample (0.5 where both losses vanish)."""
    lb = np.asarray(loss_bias, dtype=np.float64)
    ld = np.asarray(loss_debiased, dtype=np.float64)
    total = lb + ld
    out = np.full(lb.shape, 0.5)
    nz = total > 0
    out[nz] = lb[nz] / total[nz]
    return out


def train_lff(dataset, config, seed, q=0.7, weight_override=None) -> TrainResult:
    """Learning from Failure: a GCE-trained bias network steers the per-sample
    weights of the returned debiased network.

    ``weight_override`` replaces the relative-difficulty weights by a
    constant, which with the bias network ignored reduces to ERM.
    """
    train = dataset.train
    debiased = _init(dataset, config, seed)
    dim = int(np.prod(train.images.shape[1:]))
    state = {"bias": init_params(dim, ("identity",), RngStream(seed, derive_id("init-bias")), config.hidden)}

    def step(p, index, rng):
        x = _batch_x(train, index)
        y = train.y[index]
        b = state["bias"]
        bfeats, bcache = extractor_forward(b, x)
        blogits = dense_affine(bfeats, b.heads["identity"])
        feats, cache = extractor_forward(p, x)
        logits = dense_affine(feats, p.heads["identity"])
        if weight_override is None:
            w = lff_weights(cross_entropy_per_sample(blogits, y), cross_entropy_per_sample(logits, y))
        else:
            w = np.full(len(index), float(weight_override))
        _, dbias = generalized_cross_entropy(blogits, y, q)
        state["bias"] = _backprop_head(b, bcache, bfeats, "identity", dbias, config.lr, config.weight_decay)
        loss, dlogits = softmax_cross_entropy(logits, y, w)
        return _backprop_head(p, cache, feats, "identity", dlogits, config.lr, config.weight_decay), loss

    result = _fit(dataset, config, seed, debiased, step, n_train=len(train),
                  label_subset=_all_cues(dataset))
    result.extras["bias_params"] = state["bias"]
    return result


# ---------------------------------------------------------------------------
# Last Layer Ensemble


def train_lle(dataset, config, seed, kinds=("background_swap", "coobject_swap"), lambda_shift=1.0,
              stop_gradient=True, aggregation="dynamic", ensemble=True) -> TrainResult:
    """Per-augmentation heads on a shared extractor plus a shift classifier.

    ``ensemble=False`` is the single-head ablation: examples are still routed
    uniformly over identity and ``kinds`` but all share one head.
    """
    kinds = [AugmentationKind(k) for k in kinds]
    bad = [k.value for k in kinds if k not in TARGETED]
    if bad:
        raise ConfigError(f"not targeted augmentations: {bad}")
    names = ["identity"] + [k.value for k in kinds]
    train = dataset.train
    pool = AugmentationPool(train)

    if ensemble:
        params = _init(dataset, config, seed, names)

        def step(p, index, rng):
            new, info = lle_training_step(p, pool, index, rng, lr=config.lr,
                                          weight_decay=config.weight_decay,
                                          lambda_shift=lambda_shift, stop_gradient=stop_gradient)
            return new, info["target_loss"] + lambda_shift * info["shift_loss"]

        predictor = Predictor("lle", aggregation)
    else:
        params = _init(dataset, config, seed)

        def step(p, index, rng):
            route = rng.child("route").categorical(np.ones(len(names)), size=len(index))
            x = np.empty((len(index), train.images[0].size))
            for d, kind in enumerate(names):
                sel = np.flatnonzero(route == d)
                imgs, _ = pool.apply(kind, index[sel], rng.child("augment").child(d))
                x[sel] = flatten_images(imgs)
            return ce_step(p, x, train.y[index], None, config.lr, config.weight_decay)

        predictor = Predictor()
    return _fit(dataset, config, seed, params, step, n_train=len(train),
                label_subset=_all_cues(dataset), predictor=predictor)


# ---------------------------------------------------------------------------
# dispatch


def train_method(spec: MethodSpec, dataset, config: TrainConfig, seed: int,
                 erm_params: ModelParams | None = None) -> TrainResult:
    """Train ``spec`` with ``seed``.  DFR starts from ``erm_params`` (trained
    here when not given)."""
    k, p = spec.kind, spec.params
    labels = spec.shortcut_labels_used
    if k == "erm":
        return train_erm(dataset, config, seed)
    if k in ("mixup", "cutout", "cutmix"):
        return train_category1(dataset, config, seed, k, p)
    if k in TARGETED_METHODS:
        return targeted_aug_training(dataset, config, seed, [TARGETED_METHODS[k]])
    if k == "gdro":
        return train_gdro(dataset, config, seed, labels, p["eta"], p["gamma"])
    if k == "di":
        return train_di(dataset, config, seed, labels, p["inference"])
    if k == "subg":
        return train_subg(dataset, config, seed, labels)
    if k == "dfr":
        if erm_params is None:
            erm_params = train_erm(dataset, config, seed).params
        return retrain_dfr(erm_params, dataset, config, seed, labels)
    if k == "jtt":
        return train_jtt(dataset, config, seed, p["E"], p["lambda_up"])
    if k == "lff":
        return train_lff(dataset, config, seed, p["q"])
    if k == "lle":
        return train_lle(dataset, config, seed, p["kinds"], p["lambda_shift"], p["stop_gradient"],
                         p["aggregation"], p["ensemble"])
    raise ConfigError(f"unknown method kind {k!r}")


def all_label_subsets(cues=("background", "coobject")):
    """Non-empty subsets of ``cues`` in size order."""
    return [c for r in range(1, len(cues) + 1) for c in itertools.combinations(cues, r)]


__all__ = [
    "METHOD_KINDS", "LABELED_KINDS", "MethodSpec", "TrainConfig", "Predictor", "EpochRecord",
    "TrainResult", "select_early_stop", "worst_group_from_tallies", "predict_table", "train_erm",
    "train_category1", "targeted_aug_training", "train_gdro", "gdro_q_update", "subsample_groups", "train_subg",
    "retrain_dfr", "train_di", "predict_di", "train_jtt", "jtt_weights", "jtt_error_set", "train_lff", "lff_weights",
    "train_lle", "train_method", "group_index", "domain_index", "all_label_subsets",
]
