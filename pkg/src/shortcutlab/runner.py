"""Command-line interface and experiment orchestration.

Subcommands: ``generate``, ``train``, ``eval``, ``dynamics`` and ``report``.
Experiments are described by a JSON config file; relative output
directories resolve against ``$SHORTCUTLAB_OUT`` (default: the current
directory).  Exit codes: 0 ok, 1 usage or validation error, 2 runtime or
IO error.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import io
import json
import logging
import math
import os
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import EVAL_WATERMARK, overlay_watermark
from .errors import CompatibilityError, ConfigError, FormatError, ShortcutLabError
from .methods import DESK_LR, MethodSpec, Predictor, TrainConfig, predict_table, train_erm, train_method
from .metrics import CSV_COLUMNS, MetricsReport, PredictionTable, build_report
from .model import load_checkpoint, save_checkpoint
from .synth import (
    SPLITS,
    DatasetConfig,
    generate_dataset,
    plan_group_counts,
    read_dataset,
    read_manifest,
    write_dataset,
)

log = logging.getLogger("shortcutlab")

OUT_ENV = "SHORTCUTLAB_OUT"
PROFILES = {
    "desk": {"dataset": {"train_per_class": 1000}, "train": {"epochs": 60, "seeds": [0, 1, 2], "lr": DESK_LR}},
    "full": {"dataset": {"train_per_class": 4000}, "train": {"epochs": 300, "seeds": [0, 1, 2, 3, 4, 5]}},
}
METRIC_COLUMNS = ("id_acc", "bg_gap", "coobj_gap", "combined_gap", "worst_group",
                  "overall_gap", "class_gap", "delta_prob", "delta_prob_conditional")
GAP_COLUMNS = ("bg_gap", "coobj_gap", "combined_gap", "overall_gap")


class UsageError(ShortcutLabError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig | None
    dataset_path: str | None
    methods: list
    train: TrainConfig
    watermark_eval: bool = False
    focus_class: int = 0
    output_dir: str = "runs"
    profile: str = "desk"
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {"profile", "dataset", "methods", "train", "eval", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        profile = d.get("profile", "desk")
        if profile not in PROFILES:
            raise ConfigError(f"profile={profile!r} not one of {tuple(PROFILES)}")
        ds = dict(d.get("dataset", {}))
        path = ds.pop("path", None)
        dataset = None
        if path is None:
            dataset = DatasetConfig.from_dict({**PROFILES[profile]["dataset"], **ds})
        elif ds:
            raise ConfigError("dataset.path cannot be combined with other dataset fields")
        train = TrainConfig.from_dict({**PROFILES[profile]["train"], **d.get("train", {})})
        methods = [MethodSpec.from_dict(m) for m in d.get("methods", [{"kind": "erm"}])]
        labels = [m.label for m in methods]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"method labels must be unique, got {labels}")
        ev = dict(d.get("eval", {}))
        bad = set(ev) - {"watermark", "focus_class"}
        if bad:
            raise ConfigError(f"unknown eval fields: {sorted(bad)}")
        focus = int(ev.get("focus_class", 0))
        if focus not in (0, 1):
            raise ConfigError(f"eval.focus_class must be 0 or 1, got {focus}")
        return cls(dataset, path, methods, train, bool(ev.get("watermark", False)), focus,
                   d.get("output_dir", "runs"), profile, d)

    @property
    def out_root(self) -> str:
        return resolve_out(self.output_dir)

    @property
    def dataset_dir(self) -> str:
        if self.dataset_path is not None:
            return resolve_out(self.dataset_path)
        return os.path.join(self.out_root, "dataset")

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def resolve_out(path) -> str:
    if os.path.isabs(path):
        return path
    return os.path.join(os.environ.get(OUT_ENV, "."), path)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    method: str
    seed: int
    selected_epoch: int
    report: MetricsReport
    wall_clock: float
    config_hash: str
    dataset_hash: str
    trajectory_hash: str

    def to_dict(self) -> dict:
        return {
            "method": self.method, "seed": self.seed, "selected_epoch": self.selected_epoch,
            "report": self.report.to_dict(), "wall_clock": self.wall_clock,
            "config_hash": self.config_hash, "dataset_hash": self.dataset_hash,
            "trajectory_hash": self.trajectory_hash,
        }

    @classmethod
    def from_dict(cls, d) -> "RunRecord":
        d = dict(d)
        d["report"] = MetricsReport.from_dict(d["report"])
        return cls(**d)

    def record_hash(self) -> str:
        """Hash of every field except wall-clock time."""
        d = self.to_dict()
        d.pop("wall_clock")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def row(self) -> dict:
        return self.report.to_row(self.method, self.seed, self.selected_epoch)


def evaluate(params, predictor: Predictor, dataset, watermark=False, focus_class=0) -> MetricsReport:
    """Clean test metrics, plus the perturbation block under ``watermark``."""
    test = dataset.test
    table = predict_table(params, predictor, test)
    perturbed = None
    if watermark:
        images = overlay_watermark(test.images, EVAL_WATERMARK)
        probs = np.concatenate([predictor.probs(params, images[i:i + 1024])
                                for i in range(0, len(images), 1024)])
        perturbed = PredictionTable.from_split(test, probs)
    return build_report(table, dataset.train_group_frequencies(), perturbed, focus_class)


def run_one(spec: MethodSpec, dataset, exp: ExperimentConfig, seed: int, erm_cache=None):
    t0 = time.perf_counter()
    erm_params = None
    if spec.kind == "dfr":
        if erm_cache is not None and seed in erm_cache:
            erm_params = erm_cache[seed]
        else:
            erm_params = train_erm(dataset, exp.train, seed).params
    result = train_method(spec, dataset, exp.train, seed, erm_params=erm_params)
    report = evaluate(result.params, result.predictor, dataset, exp.watermark_eval, exp.focus_class)
    report.cue_alignment_per_epoch = [
        {"epoch": e, "target": t, "background": b, "coobject": c} for e, t, b, c in result.dynamics()
    ]
    record = RunRecord(
        method=spec.label, seed=seed, selected_epoch=result.selected_epoch, report=report,
        wall_clock=time.perf_counter() - t0, config_hash=exp.config_hash(),
        dataset_hash=dataset.config.config_hash(), trajectory_hash=result.trajectory_hash,
    )
    return record, result


def _write_run(run_dir, record: RunRecord, result, spec: MethodSpec):
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "record.json"), "w") as f:
        json.dump(record.to_dict(), f, indent=2, sort_keys=True)
    meta = {
        "method": spec.to_dict(), "seed": record.seed, "selected_epoch": record.selected_epoch,
        "predictor": result.predictor.to_dict(), "dataset_hash": record.dataset_hash,
        "label_subset": list(result.label_subset),
    }
    save_checkpoint(os.path.join(run_dir, "checkpoint.ckpt"), result.params, meta)
    with open(os.path.join(run_dir, "dynamics.csv"), "w", newline="") as f:
        f.write(dynamics_csv(result.dynamics()))


def dynamics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "target", "background", "coobject"])
    for epoch, *vals in rows:
        w.writerow([epoch, *(repr(float(v)) for v in vals)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_generate(exp: ExperimentConfig, out=None, force=False) -> str:
    out = out or sys.stdout
    if exp.dataset is None:
        raise UsageError("config points at an existing dataset path; nothing to generate")
    path = exp.dataset_dir
    if os.path.exists(os.path.join(path, "manifest.json")) and not force:
        manifest = read_manifest(path)
        if manifest.config_hash == exp.dataset.config_hash():
            read_dataset(path)  # verifies payload and counts
            print(f"dataset at {path} already exists, hash matches ({manifest.content_hash[:12]})", file=out)
            return path
        raise FormatError(f"{path} holds a dataset with a different config; pass --force to overwrite")
    for split in SPLITS:
        plan = plan_group_counts(exp.dataset, split)
        print(f"{split}: " + " ".join(f"{k}={v}" for k, v in sorted(plan.items())), file=out)
    manifest = write_dataset(generate_dataset(exp.dataset), path)
    print(f"wrote {path} (content hash {manifest.content_hash[:12]})", file=out)
    return path


def _load_dataset(exp: ExperimentConfig):
    path = exp.dataset_dir
    if not os.path.exists(os.path.join(path, "manifest.json")):
        if exp.dataset is None:
            raise FormatError(f"no dataset at {path}")
        cmd_generate(exp, out=sys.stderr)
    ds = read_dataset(path)
    if exp.dataset is not None and ds.config.config_hash() != exp.dataset.config_hash():
        raise CompatibilityError(f"dataset at {path} was generated from a different config")
    return ds


def cmd_train(exp: ExperimentConfig, methods=None, seeds=None, out=None) -> list:
    out = out or sys.stdout
    dataset = _load_dataset(exp)
    specs = exp.methods
    if methods:
        known = {m.label: m for m in specs}
        missing = [m for m in methods if m not in known]
        if missing:
            raise UsageError(f"methods not in config: {missing}; have {sorted(known)}")
        specs = [known[m] for m in methods]
    seeds = list(exp.train.seeds if seeds is None else seeds)
    records = []
    for spec in specs:
        per = []
        for seed in seeds:
            record, result = run_one(spec, dataset, exp, seed)
            run_dir = os.path.join(exp.out_root, "runs", _safe(spec.label), f"seed{seed}")
            _write_run(run_dir, record, result, spec)
            per.append(record)
            print(f"{spec.label} seed={seed} epoch={record.selected_epoch} "
                  f"id_acc={record.report.id_acc:.4f} bg_gap={record.report.bg_gap:+.4f} "
                  f"coobj_gap={record.report.coobj_gap:+.4f} "
                  f"combined_gap={record.report.combined_gap:+.4f} ({record.wall_clock:.1f}s)", file=out)
        print(summary_text(per), file=out)
        records += per
    return records


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label).strip("_")


def _mean_std(values):
    xs = [v for v in values if v is not None and not math.isnan(v)]
    if not xs:
        return math.nan, math.nan
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def summary_text(records) -> str:
    lines = []
    for col in ("id_acc", "bg_gap", "coobj_gap", "combined_gap", "worst_group"):
        m, s = _mean_std([getattr(r.report, col) for r in records])
        lines.append(f"  {col}: mean {m:+.4f} std {s:.4f} (n={len(records)})")
    return f"{records[0].method} summary\n" + "\n".join(lines) if records else ""


def cmd_eval(checkpoint, dataset_path, watermark=False, focus_class=0) -> MetricsReport:
    params, meta = load_checkpoint(checkpoint)
    dataset = read_dataset(dataset_path)
    if meta.get("dataset_hash") != dataset.config.config_hash():
        raise CompatibilityError(
            f"checkpoint was trained on dataset {meta.get('dataset_hash')}, "
            f"{dataset_path} is {dataset.config.config_hash()}")
    pred = meta.get("predictor", {"kind": "head"})
    return evaluate(params, Predictor(pred["kind"], pred.get("mode", "dynamic")), dataset,
                    watermark, focus_class)


def cmd_dynamics(path) -> str:
    """CSV of per-epoch cue alignments from a run directory or record file."""
    if os.path.isdir(path):
        path = os.path.join(path, "record.json")
    try:
        with open(path) as f:
            record = RunRecord.from_dict(json.load(f))
    except FileNotFoundError:
        raise FormatError(f"no run record at {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: unreadable run record ({e})") from None
    rows = [(r["epoch"], r["target"], r["background"], r["coobject"])
            for r in record.report.cue_alignment_per_epoch]
    return dynamics_csv(rows)


def load_records(pattern) -> list:
    paths = sorted(glob.glob(pattern, recursive=True))
    if not paths:
        raise FormatError(f"no run records match {pattern!r}")
    out = []
    for p in paths:
        with open(p) as f:
            out.append(RunRecord.from_dict(json.load(f)))
    return out


def amplification(gap, erm_gap):
    """``|gap| / |erm_gap|`` when both gaps are negative and the method's
    magnitude is larger, else ``None``."""
    if gap is None or erm_gap is None or math.isnan(gap) or math.isnan(erm_gap):
        return None
    if gap < 0 and erm_gap < 0 and abs(gap) / abs(erm_gap) > 1.0:
        return abs(gap) / abs(erm_gap)
    return None


def report_table(records, baseline="erm"):
    """Per-method means with deltas vs the baseline and amplification flags.

    Returns ``(rows, csv_text, aligned_text)``.
    """
    by_method = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    if baseline not in by_method:
        raise FormatError(f"report needs a {baseline!r} baseline record")
    means = {}
    for m, recs in by_method.items():
        means[m] = {}
        for col in METRIC_COLUMNS:
            vals = []
            for r in recs:
                v = r.row()[col]
                vals.append(float(v) if v != "" else math.nan)
            means[m][col] = _mean_std(vals)[0]
    order = [baseline] + sorted(m for m in by_method if m != baseline)
    rows = []
    for m in order:
        row = {"method": m, "n_seeds": len(by_method[m])}
        for col in METRIC_COLUMNS:
            v, b = means[m][col], means[baseline][col]
            row[col] = v
            row[f"{col}_delta"] = v - b
            if col in GAP_COLUMNS:
                ratio = amplification(v, b) if m != baseline else None
                row[f"{col}_flag"] = "" if ratio is None else f"\u00d7{ratio:.2f}"
        rows.append(row)
    cols = list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(v) for k, v in row.items()})
    return rows, buf.getvalue(), aligned(rows)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def aligned(rows) -> str:
    shown = ["method", "n_seeds", "id_acc", "bg_gap", "coobj_gap", "combined_gap", "worst_group"]
    if any(not math.isnan(r["class_gap"]) for r in rows):
        shown += ["overall_gap", "class_gap"]
    cells = [shown]
    for r in rows:
        line = []
        for c in shown:
            v = r[c]
            if isinstance(v, float):
                text = "-" if math.isnan(v) else f"{100 * v:+.1f}"
                flag = r.get(f"{c}_flag", "")
                line.append(text + (f" {flag}" if flag else ""))
            else:
                line.append(str(v))
        cells.append(line)
    widths = [max(len(row[i]) for row in cells) for i in range(len(shown))]
    return "\n".join("  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)) for row in cells)


def cmd_report(pattern, baseline="erm", csv_out=None, out=None):
    out = out or sys.stdout
    rows, csv_text, text = report_table(load_records(pattern), baseline)
    if csv_out:
        with open(csv_out, "w") as f:
            f.write(csv_text)
    print(text, file=out)
    return rows


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shortcutlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render the dataset described by a config")
    g.add_argument("config")
    g.add_argument("--force", action="store_true", help="overwrite a dataset built from another config")

    t = sub.add_parser("train", help="train methods over seeds and write run records")
    t.add_argument("config")
    t.add_argument("--method", action="append", help="method label to train (repeatable)")
    t.add_argument("--seeds", help="comma-separated seed list overriding the config")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--watermark", action="store_true", help="add the watermark perturbation block")
    e.add_argument("--focus-class", type=int, default=0, choices=(0, 1))

    d = sub.add_parser("dynamics", help="per-epoch cue alignment CSV of a run")
    d.add_argument("run", help="run directory or record.json")
    d.add_argument("--out", help="write the CSV here instead of stdout")

    r = sub.add_parser("report", help="compare run records against the ERM baseline")
    r.add_argument("records", help="glob of record.json files")
    r.add_argument("--baseline", default="erm")
    r.add_argument("--csv", help="also write the table as CSV")
    return p


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            cmd_generate(load_config(args.config), force=args.force)
        elif args.command == "train":
            seeds = _parse_seeds(args.seeds) if args.seeds else None
            cmd_train(load_config(args.config), args.method, seeds)
        elif args.command == "eval":
            report = cmd_eval(args.checkpoint, args.dataset, args.watermark, args.focus_class)
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        elif args.command == "dynamics":
            text = cmd_dynamics(args.run)
            if args.out:
                with open(args.out, "w") as f:
                    f.write(text)
            else:
                sys.stdout.write(text)
        elif args.command == "report":
            cmd_report(args.records, args.baseline, args.csv)
    except (UsageError, ConfigError) as e:
        print(f"shortcutlab: error: {e}", file=sys.stderr)
        return 1
    except (ShortcutLabError, OSError) as e:
        print(f"shortcutlab: error: {e}", file=sys.stderr)
        return 2
    return 0


__all__ = ["ExperimentConfig", "RunRecord", "cmd_generate", "cmd_train", "cmd_eval",
           "cmd_dynamics", "cmd_report", "report_table", "amplification", "main", "CSV_COLUMNS"]
