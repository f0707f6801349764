"""Group accuracies, shortcut gaps, perturbation gaps and cue alignment.

Undefined values (a metric over an empty group) are ``nan`` in memory and
``null`` / empty in the serialized report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DataError
from .synth import GroupKey

TARGET = "target"


@dataclass
class PredictionTable:
    """One row per evaluated sample."""

    pred: np.ndarray  # (N,) predicted class
    probs: np.ndarray  # (N, 2)
    y: np.ndarray  # (N,)
    cue_labels: dict  # cue name -> (N,) labels
    group_cues: tuple  # cue names forming the group key, in key order
    sample_id: np.ndarray
    split: str = "test"

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.sample_id = np.asarray(self.sample_id)
        self.cue_labels = {k: np.asarray(v, dtype=np.int64) for k, v in self.cue_labels.items()}
        n = len(self.y)
        if self.pred.shape != (n,) or self.probs.shape[0] != n or self.sample_id.shape != (n,):
            raise DataError("prediction table columns differ in length")
        if n and np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-9):
            raise DataError("probability rows must sum to 1")
        missing = [c for c in self.group_cues if c not in self.cue_labels]
        if missing:
            raise DataError(f"group cues without labels: {missing}")
        self.group_cues = tuple(self.group_cues)

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_split(cls, split, probs, pred=None) -> "PredictionTable":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(
            pred=probs.argmax(axis=1) if pred is None else pred,
            probs=probs,
            y=split.y,
            cue_labels={n: split.cue(n) for n in split.config.cue_names},
            group_cues=tuple(c.name for c in split.config.enabled_cues),
            sample_id=split.sample_seed,
            split=split.name,
        )

    def bits(self, cue_names=None) -> np.ndarray:
        names = self.group_cues if cue_names is None else tuple(cue_names)
        if not names:
            return np.zeros((len(self), 0), dtype=np.int64)
        return np.stack([(self.cue_labels[c] == self.y).astype(np.int64) for c in names], axis=1)

    def group_keys(self, cue_names=None) -> list:
        return [GroupKey(int(y), tuple(int(b) for b in row))
                for y, row in zip(self.y, self.bits(cue_names))]

    def correct(self) -> np.ndarray:
        return self.pred == self.y


def group_tallies(table: PredictionTable, cue_names=None) -> dict:
    """``GroupKey -> (correct, total)`` over the groups present in ``table``."""
    out = {}
    for key, ok in zip(table.group_keys(cue_names), table.correct()):
        c, n = out.get(key, (0, 0))
        out[key] = (c + int(ok), n + 1)
    return dict(sorted(out.items()))


def per_group_accuracy(table: PredictionTable, cue_names=None) -> dict:
    return {k: c / n for k, (c, n) in group_tallies(table, cue_names).items()}


def group_counts(table: PredictionTable, cue_names=None) -> dict:
    return {k: n for k, (_, n) in group_tallies(table, cue_names).items()}


def _exact(x) -> Fraction:
    # shortest decimal repr, so 0.0475 means 475/10000 rather than its binary neighbour
    return Fraction(repr(float(x)))


def id_accuracy(group_acc: dict, weights: dict) -> float:
    """``sum_g w_g * acc_g``; ``nan`` if a weighted group was not measured.

    Summed in rational arithmetic and rounded once.
    """
    total = Fraction(0)
    for key, w in weights.items():
        if w == 0:
            continue
        acc = group_acc.get(key)
        if acc is None or math.isnan(acc):
            return math.nan
        total += _exact(w) * _exact(acc)
    return float(total)


def pooled_accuracy(group_acc: dict, counts: dict, select) -> float:
    """Sample-weighted accuracy over the groups whose key satisfies ``select``."""
    num = den = 0
    for key, acc in group_acc.items():
        if select(key):
            num += acc * counts[key]
            den += counts[key]
    return num / den if den else math.nan


def shortcut_gaps(group_acc: dict, counts: dict, id_acc: float, cue_names,
                  background="background", coobject="coobject") -> dict:
    """BG, CoObj and BG+CoObj gaps, plus the per-group variants.

    ``cue_names`` gives the order of the bits in the group keys.  Any other
    cues in the key are pooled over.
    """
    names = list(cue_names)
    ib, ic = names.index(background), names.index(coobject)
    pattern = {"bg_gap": (0, 1), "coobj_gap": (1, 0), "combined_gap": (0, 0)}
    out = {}
    per_group = {}
    for metric, (b, c) in pattern.items():

        def select(k, b=b, c=c):
            return k.cue_bits[ib] == b and k.cue_bits[ic] == c

        out[metric] = pooled_accuracy(group_acc, counts, select) - id_acc
        for key, acc in group_acc.items():
            if select(key):
                per_group[f"{metric}[{key}]"] = acc - id_acc
    out["per_group"] = per_group
    return out


def worst_group(group_acc: dict) -> float:
    if not group_acc:
        raise DataError("worst_group needs at least one group")
    return min(group_acc.values())


def _mean(x):
    return float(np.mean(x)) if len(x) else math.nan


def perturbation_gaps(clean: PredictionTable, perturbed: PredictionTable, focus_class: int) -> dict:
    """Accuracy and focus-class probability shifts caused by a perturbation."""
    if clean.sample_id.shape != perturbed.sample_id.shape or not np.array_equal(
            clean.sample_id, perturbed.sample_id):
        raise DataError("clean and perturbed tables must cover the same sample ids in the same order")
    k = int(focus_class)
    in_k = clean.y == k
    return {
        "overall_gap": _mean(perturbed.correct()) - _mean(clean.correct()),
        "class_gap": _mean(perturbed.correct()[in_k]) - _mean(clean.correct()[in_k]),
        "delta_prob": _mean(perturbed.probs[:, k]) - _mean(clean.probs[:, k]),
        "delta_prob_conditional": _mean(perturbed.probs[in_k, k]) - _mean(clean.probs[in_k, k]),
    }


def cue_alignment(pred, cue_labels: dict) -> dict:
    """Fraction of samples whose prediction equals each cue's label."""
    pred = np.asarray(pred)
    return {name: _mean(pred == np.asarray(lab)) for name, lab in cue_labels.items()}


def table_alignment(table: PredictionTable, cues=("background", "coobject")) -> dict:
    labels = {TARGET: table.y}
    labels.update({c: table.cue_labels[c] for c in cues if c in table.cue_labels})
    return cue_alignment(table.pred, labels)


CSV_COLUMNS = (
    "method", "seed", "selected_epoch", "id_acc", "bg_gap", "coobj_gap", "combined_gap",
    "worst_group", "mean_acc", "overall_gap", "class_gap", "delta_prob", "delta_prob_conditional",
)


@dataclass
class MetricsReport:
    group_accuracy: dict  # group key string -> accuracy
    group_counts: dict
    id_acc: float
    bg_gap: float
    coobj_gap: float
    combined_gap: float
    worst_group: float
    mean_acc: float
    per_group_gaps: dict = field(default_factory=dict)
    perturbation: dict | None = None
    cue_alignment: dict = field(default_factory=dict)
    cue_alignment_per_epoch: list = field(default_factory=list)

    def to_row(self, method="", seed="", selected_epoch="") -> dict:
        p = self.perturbation or {}
        values = {
            "method": method, "seed": seed, "selected_epoch": selected_epoch,
            "id_acc": self.id_acc, "bg_gap": self.bg_gap, "coobj_gap": self.coobj_gap,
            "combined_gap": self.combined_gap, "worst_group": self.worst_group,
            "mean_acc": self.mean_acc,
        }
        for k in ("overall_gap", "class_gap", "delta_prob", "delta_prob_conditional"):
            values[k] = p.get(k)
        return {c: _csv_value(values[c]) for c in CSV_COLUMNS}

    def to_dict(self) -> dict:
        return _jsonable({
            "group_accuracy": self.group_accuracy,
            "group_counts": self.group_counts,
            "id_acc": self.id_acc,
            "bg_gap": self.bg_gap,
            "coobj_gap": self.coobj_gap,
            "combined_gap": self.combined_gap,
            "worst_group": self.worst_group,
            "mean_acc": self.mean_acc,
            "per_group_gaps": self.per_group_gaps,
            "perturbation": self.perturbation,
            "cue_alignment": self.cue_alignment,
            "cue_alignment_per_epoch": self.cue_alignment_per_epoch,
        })

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def num(v):
            return math.nan if v is None else v
        d = dict(d)
        for k in ("id_acc", "bg_gap", "coobj_gap", "combined_gap", "worst_group", "mean_acc"):
            d[k] = num(d[k])
        d["group_accuracy"] = {k: num(v) for k, v in d["group_accuracy"].items()}
        if d.get("perturbation"):
            d["perturbation"] = {k: num(v) for k, v in d["perturbation"].items()}
        return cls(**d)


def _csv_value(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def build_report(table: PredictionTable, train_frequencies: dict,
                 perturbed: PredictionTable | None = None, focus_class: int = 0) -> MetricsReport:
    """Full report for one evaluated model.

    Groups in the weights that the table does not cover make I.D. Acc and
    the gaps undefined.
    """
    tallies = group_tallies(table)
    acc = {k: c / n for k, (c, n) in tallies.items()}
    counts = {k: n for k, (_, n) in tallies.items()}
    ida = id_accuracy(acc, train_frequencies)
    gaps = shortcut_gaps(acc, counts, ida, table.group_cues)
    return MetricsReport(
        group_accuracy={str(k): v for k, v in acc.items()},
        group_counts={str(k): v for k, v in counts.items()},
        id_acc=ida,
        bg_gap=gaps["bg_gap"],
        coobj_gap=gaps["coobj_gap"],
        combined_gap=gaps["combined_gap"],
        worst_group=worst_group(acc) if acc else math.nan,
        mean_acc=_mean(table.correct()),
        per_group_gaps=gaps["per_group"],
        perturbation=None if perturbed is None else perturbation_gaps(table, perturbed, focus_class),
        cue_alignment=table_alignment(table),
    )
