"""Cross-quality accuracy grids, SR-recovery experiments and report files."""

import csv
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import ValidationError
from .classifier import ClassifierConfig, evaluate_classifier, train_classifier
from .dataset import QUALITIES, Quality, Task, build_classification_split, capped_pool, dataset_checksum
from .metrics import absolute_improvement, relative_improvement
from .params import ModelParams
from .sr_models import enhance_subset

logger = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1
MATRIX_HEADER = ("train_quality", "test_good", "test_medium", "test_poor")
SR_MODELS = ("SRGAN", "SRRESNET")
REPORT_NOTES = (
    "GOOD/MEDIUM classification sets are capped per (view, phase) cell at the POOR-tier "
    "cell count; this matching is an interpretation, not a documented protocol.",
    "Train/test splits are by frame unless by_patient is recorded as true.",
    "Relative improvement (percent of baseline) is the headline delta; absolute "
    "percentage points are reported alongside.",
)


class Mode(str, Enum):
    TRAIN_ON_SR = "TRAIN_ON_SR"
    TEST_ON_SR = "TEST_ON_SR"


@dataclass
class EvalMatrix:
    """Mean (and std) accuracy for every (train tier, test tier) pair."""

    task: Task
    cells: dict
    std: dict
    per_seed: dict
    seeds: list
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.task = Task(self.task)
        for tr in QUALITIES:
            for te in QUALITIES:
                v = self.cells.get((tr, te))
                if v is None or not 0.0 <= v <= 1.0:
                    raise ValidationError(f"cell ({tr.value}, {te.value}) missing or out of range: {v}")

    def row(self, train_quality):
        return [self.cells[(Quality(train_quality), te)] for te in QUALITIES]

    def to_dict(self):
        def nest(d):
            return {tr.value: {te.value: d[(tr, te)] for te in QUALITIES} for tr in QUALITIES}

        return {"task": self.task.value, "cells": nest(self.cells), "std": nest(self.std),
                "per_seed": nest(self.per_seed), "seeds": list(self.seeds), "config": self.config}

    @classmethod
    def from_dict(cls, d):
        def flat(nested):
            return {(Quality(tr), Quality(te)): v for tr, row in nested.items() for te, v in row.items()}

        return cls(d["task"], flat(d["cells"]), flat(d["std"]), flat(d["per_seed"]), d["seeds"], d.get("config", {}))


@dataclass
class SRImprovementRecord:
    task: Task
    mode: Mode
    sr_model: str
    counterpart_quality: Quality
    baseline_acc: float
    enhanced_acc: float
    abs_delta_pp: float = None
    rel_delta_pct: float = None
    baseline_per_seed: list = field(default_factory=list)
    enhanced_per_seed: list = field(default_factory=list)
    checksums: list = field(default_factory=list)

    def __post_init__(self):
        self.task = Task(self.task)
        self.mode = Mode(self.mode)
        self.counterpart_quality = Quality(self.counterpart_quality)
        abs_d = absolute_improvement(self.baseline_acc, self.enhanced_acc)
        rel_d = relative_improvement(self.baseline_acc, self.enhanced_acc)
        if self.abs_delta_pp is None:
            self.abs_delta_pp = abs_d
        if self.rel_delta_pct is None:
            self.rel_delta_pct = rel_d
        if self.abs_delta_pp != abs_d or self.rel_delta_pct != rel_d:
            raise ValidationError("stored deltas do not match the stored accuracies")

    def to_dict(self):
        return {
            "task": self.task.value, "mode": self.mode.value, "sr_model": self.sr_model,
            "counterpart_quality": self.counterpart_quality.value,
            "baseline_acc": self.baseline_acc, "enhanced_acc": self.enhanced_acc,
            "abs_delta_pp": self.abs_delta_pp, "rel_delta_pct": self.rel_delta_pct,
            "baseline_per_seed": self.baseline_per_seed, "enhanced_per_seed": self.enhanced_per_seed,
            "checksums": self.checksums,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class _ClassifierCache:
    """Memoizes trained classifiers by (dataset variant, task, tier, seed)."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._models = {}

    def get(self, variant, ds, task, quality, seed, by_patient=False):
        key = (variant, Task(task), Quality(quality), seed)
        if key not in self._models:
            split = build_classification_split(ds, task, quality, seed, by_patient=by_patient)
            cfg = ClassifierConfig.from_dict({**self.cfg.to_dict(), "seed": seed})
            params, _ = train_classifier(split, cfg)
            logger.info("trained %s classifier on %s (%s), seed %d", Task(task).value,
                        Quality(quality).value, variant, seed)
            self._models[key] = (split, params)
        return self._models[key]


def _require_tiers(ds, tiers):
    for q in tiers:
        if not any(f.quality is q for f in ds):
            raise ValidationError(f"quality tier {q.value} is empty")


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _test_pool(ds, split, train_q, test_q, seed):
    return list(split.test) if train_q is test_q else capped_pool(ds, test_q, seed)


def run_cross_quality(ds, task, cfg, seeds=(0, 1, 2), by_patient=False, _cache=None):
    """Train on each tier, test on every tier; cells hold the mean accuracy over seeds."""
    task = Task(task)
    seeds = list(seeds)
    if not seeds:
        raise ValidationError("need at least one seed")
    _require_tiers(ds, QUALITIES)
    cache = _cache or _ClassifierCache(cfg)
    per_seed = {}
    for tr in QUALITIES:
        runs = {te: [] for te in QUALITIES}
        for seed in seeds:
            split, params = cache.get("original", ds, task, tr, seed, by_patient)
            for te in QUALITIES:
                runs[te].append(evaluate_classifier(params, _test_pool(ds, split, tr, te, seed), task).accuracy)
        for te in QUALITIES:
            per_seed[(tr, te)] = runs[te]
    cells, std = {}, {}
    for k, v in per_seed.items():
        cells[k], std[k] = _mean_std(v)
    config = {**cfg.to_dict(), "by_patient": by_patient}
    return EvalMatrix(task, cells, std, per_seed, seeds, config)


def _enhance(enhancer, subset):
    if isinstance(enhancer, ModelParams):
        return enhance_subset(subset, enhancer)
    return enhancer(subset)


def _enhanced_variants(ds, enhancers):
    poor = ds.filter(quality=Quality.POOR)
    return {name: ds.replace_frames(_enhance(e, poor)) for name, e in sorted(enhancers.items())}


def run_sr_train_experiment(ds, task, enhancers, cfg, seeds=(0, 1, 2), by_patient=False,
                            _cache=None, _variants=None):
    """Retrain on SR-enhanced POOR frames and compare against the train-on-POOR row.

    ``enhancers`` maps a model name (e.g. "SRRESNET") to generator weights or a
    callable taking and returning an EchoDataset.
    """
    task = Task(task)
    _require_tiers(ds, QUALITIES)
    cache = _cache or _ClassifierCache(cfg)
    variants = _variants or _enhanced_variants(ds, enhancers)
    records = []
    for name in sorted(enhancers):
        sr_ds = variants[name]
        base = {te: [] for te in QUALITIES}
        enh = {te: [] for te in QUALITIES}
        for seed in seeds:
            split, params = cache.get("original", ds, task, Quality.POOR, seed, by_patient)
            sr_split, sr_params = cache.get(name, sr_ds, task, Quality.POOR, seed, by_patient)
            for te in QUALITIES:
                base[te].append(evaluate_classifier(params, _test_pool(ds, split, Quality.POOR, te, seed), task).accuracy)
                enh[te].append(evaluate_classifier(sr_params, _test_pool(sr_ds, sr_split, Quality.POOR, te, seed), task).accuracy)
        for te in QUALITIES:
            records.append(SRImprovementRecord(
                task, Mode.TRAIN_ON_SR, name, te, _mean_std(base[te])[0], _mean_std(enh[te])[0],
                baseline_per_seed=base[te], enhanced_per_seed=enh[te],
            ))
    return records


def run_sr_test_experiment(ds, task, enhancers, cfg, seeds=(0, 1, 2), by_patient=False,
                           _cache=None, _variants=None):
    """Evaluate frozen GOOD- and MEDIUM-trained classifiers on POOR vs SR-enhanced POOR frames."""
    task = Task(task)
    _require_tiers(ds, QUALITIES)
    cache = _cache or _ClassifierCache(cfg)
    variants = _variants or _enhanced_variants(ds, enhancers)
    records = []
    for name in sorted(enhancers):
        sr_ds = variants[name]
        sr_by_key = {f.key: f for f in sr_ds}
        for tr in (Quality.GOOD, Quality.MEDIUM):
            base, enh, sums = [], [], []
            for seed in seeds:
                _, params = cache.get("original", ds, task, tr, seed, by_patient)
                pool = capped_pool(ds, Quality.POOR, seed)
                before = params.checksum()
                base.append(evaluate_classifier(params, pool, task).accuracy)
                enh.append(evaluate_classifier(params, [sr_by_key[f.key] for f in pool], task).accuracy)
                after = params.checksum()
                if before != after:
                    raise RuntimeError("classifier weights changed during frozen evaluation")
                sums.append([before, after])
            records.append(SRImprovementRecord(
                task, Mode.TEST_ON_SR, name, tr, _mean_std(base)[0], _mean_std(enh)[0],
                baseline_per_seed=base, enhanced_per_seed=enh, checksums=sums,
            ))
    return records


def _exact_mean(values):
    return math.fsum(values) / len(values)


def compare_sr_models(records):
    """Mean relative improvement per SR model, overall and per task.

    Means use a correctly rounded sum, so they do not depend on record order
    and are unchanged when the record list is duplicated.
    """
    records = list(records)
    present = {r.sr_model for r in records}
    missing = [m for m in SR_MODELS if m not in present]
    if missing:
        raise ValidationError(f"no records for SR model(s): {', '.join(missing)}")
    summary = {"overall": {}, "by_task": {}, "by_mode": {}}
    for name in sorted(present):
        mine = [r for r in records if r.sr_model == name]
        summary["overall"][name] = _exact_mean([r.rel_delta_pct for r in mine])
        for task in sorted({r.task.value for r in mine}):
            vals = [r.rel_delta_pct for r in mine if r.task.value == task]
            summary["by_task"].setdefault(task, {})[name] = _exact_mean(vals)
        for mode in sorted({r.mode.value for r in mine}):
            vals = [r.rel_delta_pct for r in mine if r.mode.value == mode]
            summary["by_mode"].setdefault(mode, {})[name] = _exact_mean(vals)
    return summary


def run_all(ds, tasks, cfg, seeds=(0, 1, 2), enhancers=None, modes=("cross-quality", "train-on-sr", "test-on-sr"),
            by_patient=False):
    """Every requested experiment for every task, sharing trained classifiers."""
    enhancers = enhancers or {}
    cache = _ClassifierCache(cfg)
    variants = _enhanced_variants(ds, enhancers) if enhancers else {}
    matrices, records = [], []
    for task in tasks:
        if "cross-quality" in modes:
            matrices.append(run_cross_quality(ds, task, cfg, seeds, by_patient, _cache=cache))
        if enhancers and "train-on-sr" in modes:
            records += run_sr_train_experiment(ds, task, enhancers, cfg, seeds, by_patient, cache, variants)
        if enhancers and "test-on-sr" in modes:
            records += run_sr_test_experiment(ds, task, enhancers, cfg, seeds, by_patient, cache, variants)
    return matrices, records


# --------------------------------------------------------------------------
# reports


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def results_dict(matrices, records, config=None):
    out = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "matrices": [m.to_dict() for m in matrices],
        "records": [r.to_dict() for r in records],
        "config": config or {},
        "notes": list(REPORT_NOTES),
    }
    if {r.sr_model for r in records} >= set(SR_MODELS):
        out["summary"] = compare_sr_models(records)
    return out


def load_results(path):
    data = json.loads(Path(path).read_text())
    if data.get("schema_version") != RESULTS_SCHEMA_VERSION:
        raise ValidationError(f"{path}: unsupported results schema {data.get('schema_version')}")
    matrices = [EvalMatrix.from_dict(m) for m in data["matrices"]]
    records = [SRImprovementRecord.from_dict(r) for r in data["records"]]
    return matrices, records, data.get("config", {})


def write_matrix_csv(matrix, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MATRIX_HEADER)
        for tr in QUALITIES:
            writer.writerow([tr.value] + [repr(v) for v in matrix.row(tr)])


PANELS = (
    ("a", Mode.TRAIN_ON_SR, Task.VIEW, "Train on SR-enhanced Poor (2CH vs 4CH)"),
    ("b", Mode.TEST_ON_SR, Task.VIEW, "Test on SR-enhanced Poor (2CH vs 4CH)"),
    ("c", Mode.TRAIN_ON_SR, Task.PHASE, "Train on SR-enhanced Poor (ED vs ES)"),
    ("d", Mode.TEST_ON_SR, Task.PHASE, "Test on SR-enhanced Poor (ED vs ES)"),
)


def _panel_data(records, mode, task):
    chosen = [r for r in records if r.mode is mode and r.task is task]
    tiers = [q.value for q in QUALITIES if any(r.counterpart_quality is q for r in chosen)]
    models = sorted({r.sr_model for r in chosen})
    bars = {m: [next((r.rel_delta_pct for r in chosen if r.sr_model == m and r.counterpart_quality.value == t), 0.0)
                for t in tiers] for m in models}
    return tiers, bars


def plot_panels(records, out_dir):
    """One bar chart per improvement panel; returns the JSON-able panel index."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    index = []
    for letter, mode, task, title in PANELS:
        tiers, bars = _panel_data(records, mode, task)
        if not bars:
            continue
        fname = f"panel_{letter}_{mode.value.lower()}_{task.value}.png"
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        width = 0.8 / len(bars)
        x = np.arange(len(tiers))
        for i, (name, vals) in enumerate(bars.items()):
            ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=name)
        ax.axhline(0.0, color="black", linewidth=0.6)
        ax.set_xticks(x)
        xlabel = "Test quality" if mode is Mode.TRAIN_ON_SR else "Train quality"
        ax.set_xticklabels(tiers)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("Relative improvement (%)")
        ax.set_title(title, fontsize=9)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(Path(out_dir) / fname, dpi=100, metadata={"Software": None})
        plt.close(fig)
        index.append({"panel": letter, "file": fname, "title": title, "mode": mode.value,
                      "task": task.value, "categories": tiers, "bars": bars})
    return index


def write_manifest(out_dir, config, seeds, provenance=None, input_checksums=None, status="started"):
    manifest = {
        "code_version": __version__,
        "python": platform.python_version(),
        "config": config,
        "seeds": list(seeds),
        "dataset_provenance": provenance,
        "input_checksums": input_checksums or {},
        "status": status,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(_dump(manifest))
    return path


def generate_report(matrices, records, out_dir, config=None, dataset=None):
    """Write results.json, per-task matrix CSVs, improvement bar charts and a manifest.

    Returns a dict of written paths keyed by kind.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = results_dict(matrices, records, config)
    written = {"results": out / "results.json", "matrices": [], "plots": []}
    written["results"].write_text(_dump(results))
    for m in matrices:
        path = out / f"matrix_{m.task.value}.csv"
        write_matrix_csv(m, path)
        written["matrices"].append(path)
    index = plot_panels(records, out)
    (out / "plots.json").write_text(_dump(index))
    written["plots"] = [out / p["file"] for p in index]
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        # keep the manifest written before the run started
        manifest = json.loads(manifest_path.read_text())
        manifest["status"] = "complete"
        manifest_path.write_text(_dump(manifest))
    else:
        seeds = sorted({s for m in matrices for s in m.seeds})
        checksums = {"dataset": dataset_checksum(dataset)} if dataset is not None else {}
        provenance = dataset.provenance.value if dataset is not None else None
        write_manifest(out, config or {}, seeds, provenance, checksums, status="complete")
    written["manifest"] = manifest_path
    return written
