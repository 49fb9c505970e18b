"""Cross-validated training and evaluation over sequence combinations.

One model is trained per (combination, fold).  Fold seeds are derived from
``(config.seed, fold index)`` only, so running folds in worker processes
gives the same numbers as running them one after another.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, EpvsError
from .lesion import connected_components
from .metrics import (
    LOWER_IS_BETTER,
    UNASSIGNED,
    AggregateReport,
    EvalConfig,
    MetricsReport,
    aggregate_subjects,
    evaluate_lesions,
    regional_breakdown,
)
from .phantom import SEQUENCES
from .preprocess import extract_axial_slices, normalize_intensity
from .unet import TrainConfig, UNetConfig, predict_volume, save_checkpoint, train

log = logging.getLogger(__name__)

PAPER_COMBOS = (
    ("T2w",),
    ("T2w", "FLAIR"),
    ("T2w", "FLAIR", "T1w"),
    ("T2w", "FLAIR", "T1w", "SWI"),
    ("T2w", "T1w"),
    ("FLAIR",),
    ("T1w",),
    ("T1w", "FLAIR"),
)

# desk-scale defaults: small network, cropped patches, few epochs
DEFAULT_UNET = UNetConfig(depth=2, base_filters=8)
DEFAULT_TRAIN = TrainConfig(learning_rate=3e-3, epochs=4, batch_size=8, class_weights=(1.0, 3.0),
                            patience=2, crop_size=32)

# Table-1 column order; each metric is followed by its standard error
TABLE1_METRICS = (
    "sensitivity",
    "precision",
    "magnitude_accuracy",
    "volumetric_similarity",
    "auc",
    "hausdorff_mm",
    "mahalanobis",
    "icc_lesions",
    "icc_volume",
)


def combo_name(combo) -> str:
    return "+".join(combo)


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def parse_combo(text: str) -> tuple:
    parts = tuple(p.strip() for p in re.split(r"[+,]", text) if p.strip())
    if not parts:
        raise ConfigError(f"empty sequence combination: {text!r}")
    return parts


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an ablation run.

    JSON schema (all keys optional)::

        {"combos": [["T2w"], ["T2w", "FLAIR"], ...],
         "n_val_subjects": 4,
         "n_folds": null,            # null = leave-one-out, k = k contiguous test groups
         "unet": {UNetConfig fields},
         "train": {TrainConfig fields},
         "eval": {EvalConfig fields},
         "connectivity": 26,
         "seed": 0,
         "workers": 1}
    """

    combos: tuple = PAPER_COMBOS
    n_val_subjects: int = 4
    n_folds: Optional[int] = None
    unet: UNetConfig = DEFAULT_UNET
    train: TrainConfig = DEFAULT_TRAIN
    eval: EvalConfig = EvalConfig()
    connectivity: int = 26
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        combos = tuple(tuple(c) for c in self.combos)
        if not combos:
            raise ConfigError("at least one sequence combination is required")
        for c in combos:
            if not c or len(set(c)) != len(c) or not set(c) <= set(SEQUENCES):
                raise ConfigError(f"combination {list(c)} must be a non-empty subset of {list(SEQUENCES)}")
        object.__setattr__(self, "combos", combos)
        if self.n_val_subjects < 0:
            raise ConfigError("n_val_subjects must be >= 0")
        if self.n_folds is not None and self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2 (or null for leave-one-out)")
        if self.connectivity not in (6, 18, 26):
            raise ConfigError("connectivity must be 6, 18 or 26")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "combos": [list(c) for c in self.combos],
            "n_val_subjects": self.n_val_subjects,
            "n_folds": self.n_folds,
            "unet": self.unet.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "connectivity": self.connectivity,
            "seed": self.seed,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {"combos", "n_val_subjects", "n_folds", "unet", "train", "eval", "connectivity", "seed", "workers"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            if "combos" in d:
                d["combos"] = tuple(parse_combo(c) if isinstance(c, str) else tuple(c) for c in d["combos"])
            if "unet" in d:
                d["unet"] = UNetConfig(**{**DEFAULT_UNET.to_dict(), **d["unet"]})
            if "train" in d:
                d["train"] = TrainConfig.from_dict({**DEFAULT_TRAIN.to_dict(), **d["train"]})
            if "eval" in d:
                d["eval"] = EvalConfig(**d["eval"])
        except TypeError as e:
            raise ConfigError(f"bad experiment config: {e}") from None
        return cls(**d)


@dataclass
class FoldResult:
    fold: int
    test_ids: tuple
    val_ids: tuple
    train_ids: tuple
    checkpoint: Optional[str]
    reports: tuple  # MetricsReport per test subject, regions included

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "test_ids": list(self.test_ids),
            "val_ids": list(self.val_ids),
            "train_ids": list(self.train_ids),
            "checkpoint": self.checkpoint,
            "reports": [r.to_dict() for r in self.reports],
        }


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def fold_partitions(subject_ids: Sequence[str], config: ExperimentConfig) -> list:
    """``(test, validation, train)`` id tuples per fold.

    Test groups are contiguous in cohort order (one subject each under
    leave-one-out); validation subjects are a seeded draw from the rest.
    """
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("subject ids must be unique")
    n = len(ids)
    k = n if config.n_folds is None else config.n_folds
    if k > n:
        raise ConfigError(f"{k} folds requested for {n} subjects")
    groups = [list(g) for g in np.array_split(np.array(ids, dtype=object), k)]
    out = []
    for fold, test in enumerate(groups):
        rest = [s for s in ids if s not in test]
        if config.n_val_subjects >= len(rest):
            raise ConfigError(
                f"n_val_subjects={config.n_val_subjects} leaves no training subject in fold {fold} "
                f"({len(rest)} non-test subjects)"
            )
        rng = np.random.default_rng([config.seed, fold])
        pick = set(rng.choice(len(rest), size=config.n_val_subjects, replace=False).tolist())
        val = [s for i, s in enumerate(rest) if i in pick]
        tr = [s for i, s in enumerate(rest) if i not in pick]
        out.append((tuple(test), tuple(val), tuple(tr)))
    return out


def check_sequences(cohort, combo) -> None:
    missing = [(c.subject_id, s) for c in cohort for s in combo if s not in c.volumes]
    if missing:
        listing = ", ".join(f"{sid}: {seq}" for sid, seq in missing)
        raise ConfigError(f"missing sequence(s) for combination {combo_name(combo)}: {listing}")


def subject_inputs(case, combo) -> list:
    """Intensity-normalized input volumes of one subject, in combination order."""
    return [normalize_intensity(case.volumes[s]) for s in combo]


def _samples(cases, combo):
    out = []
    for c in cases:
        out.extend(extract_axial_slices(subject_inputs(c, combo), c.gt_epvs, c.subject_id))
    return out


def evaluate_case(model, case, combo, config: ExperimentConfig) -> MetricsReport:
    prob, binary = predict_volume(model, subject_inputs(case, combo))
    pred = connected_components(binary, config.connectivity)
    gt = connected_components(case.gt_epvs, config.connectivity)
    truth = case.gt_epvs.data > 0
    rep = evaluate_lesions(pred, gt, prob=prob, gt_mask=truth, config=config.eval)
    rep.regions = regional_breakdown(pred, gt, case.regions, prob=prob, gt_mask=truth, config=config.eval)
    return rep


def run_fold(cohort, combo, config: ExperimentConfig, fold: int, partition, out_dir=None) -> FoldResult:
    test_ids, val_ids, train_ids = partition
    by_id = {c.subject_id: c for c in cohort}
    train_samples = _samples([by_id[s] for s in train_ids], combo)
    val_samples = _samples([by_id[s] for s in val_ids], combo)
    seen = {s.subject_id for s in train_samples} | {s.subject_id for s in val_samples}
    # leakage guard: a held-out subject must never reach the optimizer or the model selection
    assert not seen & set(test_ids), f"fold {fold}: test subject in training data"

    seed = fold_seed(config.seed, fold)
    ucfg = replace(config.unet, in_channels=len(combo), seed=seed)
    tcfg = replace(config.train, seed=seed)
    log.info("%s fold %d: train %d, val %d, test %s", combo_name(combo), fold, len(train_ids), len(val_ids),
             ",".join(test_ids))
    model, _ = train(ucfg, tcfg, train_samples, val_samples)
    ckpt = None
    if out_dir is not None:
        path = Path(out_dir) / "checkpoints" / slugify(combo_name(combo)) / f"{fold}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path)
        ckpt = str(path)
    reports = tuple(evaluate_case(model, by_id[s], combo, config) for s in test_ids)
    return FoldResult(fold, tuple(test_ids), tuple(val_ids), tuple(train_ids), ckpt, reports)


# worker processes get the cohort once, through fork, instead of once per task
_WORKER_COHORT = None


def _init_worker(cohort):
    global _WORKER_COHORT
    _WORKER_COHORT = cohort


def _fold_task(args):
    combo, config, fold, partition, out_dir = args
    return run_fold(_WORKER_COHORT, combo, config, fold, partition, out_dir)


def _run_folds(cohort, tasks, workers):
    if workers == 1 or len(tasks) == 1:
        return [run_fold(cohort, *t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork"),
                             initializer=_init_worker, initargs=(cohort,)) as pool:
        return list(pool.map(_fold_task, tasks))


def run_loocv(cohort, combo, config: ExperimentConfig = ExperimentConfig(), out_dir=None):
    """Train and test one model per fold; returns ``(folds, aggregate)``.

    The aggregate is taken over the test reports in fold order.
    """
    combo = tuple(combo)
    check_sequences(cohort, combo)
    parts = fold_partitions([c.subject_id for c in cohort], config)
    tasks = [(combo, config, i, p, out_dir) for i, p in enumerate(parts)]
    folds = _run_folds(cohort, tasks, config.workers)
    reports = [r for f in folds for r in f.reports]
    return folds, aggregate_subjects(reports)


# -- ablation -----------------------------------------------------------------------------


@dataclass
class AblationRow:
    combo: tuple
    aggregate: AggregateReport
    folds: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return combo_name(self.combo)


def _row_values(agg: AggregateReport) -> dict:
    """Table-1 column -> (value, standard error or None)."""
    m = agg.metrics
    vals = {
        "sensitivity": (m["sensitivity"].mean, m["sensitivity"].se),
        "precision": (m["precision"].mean, m["precision"].se),
        # sqrt of mean S and mean P, the form the published table is consistent with
        "magnitude_accuracy": (agg.magnitude_accuracy_of_means, None),
        "volumetric_similarity": (m["volumetric_similarity"].mean, m["volumetric_similarity"].se),
        "auc": (m["auc"].mean, m["auc"].se),
        "hausdorff_mm": (m["hausdorff_mm"].mean, m["hausdorff_mm"].se),
        "mahalanobis": (m["mahalanobis"].mean, m["mahalanobis"].se),
        "icc_lesions": (agg.icc_lesions, None),
        "icc_volume": (agg.icc_volume, None),
    }
    return vals


def rank_columns(rows: Sequence[AblationRow]) -> dict:
    """Column -> {"best": combo, "second": combo}; ties go to the earlier row."""
    out = {}
    for col in TABLE1_METRICS:
        scored = [(_row_values(row.aggregate)[col][0], i) for i, row in enumerate(rows)]
        scored = [(v, i) for v, i in scored if v is not None and not math.isnan(v)]
        sign = 1.0 if col in LOWER_IS_BETTER else -1.0
        scored.sort(key=lambda t: (sign * t[0], t[1]))
        out[col] = {
            "best": rows[scored[0][1]].name if scored else None,
            "second": rows[scored[1][1]].name if len(scored) > 1 else None,
        }
    return out


def run_ablation(cohort, config: ExperimentConfig = ExperimentConfig(), out_dir=None) -> list:
    """One cross-validated aggregate per combination, in config order."""
    for combo in config.combos:
        check_sequences(cohort, combo)
    rows = []
    for combo in config.combos:
        try:
            folds, agg = run_loocv(cohort, combo, config, out_dir)
        except EpvsError as e:
            raise type(e)(f"combination {combo_name(combo)}: {e}") from e
        rows.append(AblationRow(combo, agg, folds))
    return rows


# -- report files -------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


_NO_SE = ("magnitude_accuracy", "icc_lesions", "icc_volume")


def table1_header() -> list:
    header = ["combo"]
    for col in TABLE1_METRICS:
        header.append(col)
        if col == "magnitude_accuracy":
            header += ["magnitude_accuracy_subject_mean", "magnitude_accuracy_subject_mean_se"]
        elif col not in _NO_SE:
            header.append(f"{col}_se")
    return header + ["n_subjects"]


def table1_rows(named_aggregates) -> list:
    """``[(name, AggregateReport)]`` -> list of CSV rows (header first)."""
    rows = [table1_header()]
    for name, agg in named_aggregates:
        vals = _row_values(agg)
        per_subject_a = agg.metrics["magnitude_accuracy"]
        row = [name]
        for col in TABLE1_METRICS:
            v, se = vals[col]
            row.append(_fmt(v))
            if col == "magnitude_accuracy":
                row += [_fmt(per_subject_a.mean), _fmt(per_subject_a.se)]
            elif col not in _NO_SE:
                row.append(_fmt(se))
        row.append(str(agg.n_subjects))
        rows.append(row)
    return rows


def csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def region_names(named_aggregates) -> list:
    names = []
    for _, agg in named_aggregates:
        names.extend(n for n in agg.regions if n not in names and n != UNASSIGNED)
    return names


def plot_rows(named_aggregates, kind: str) -> list:
    """Scatter or Bland-Altman points for ``kind`` in {scatter,ba}_{counts,volumes}."""
    what, series = kind.split("_", 1)
    if what == "scatter":
        rows = [["combo", "predicted", "ground_truth"]]
        for name, agg in named_aggregates:
            rows += [[name, _fmt(a), _fmt(b)] for a, b in getattr(agg, f"scatter_{series}")]
    else:
        rows = [["combo", "mean", "difference"]]
        for name, agg in named_aggregates:
            ba = getattr(agg, f"bland_altman_{series}")
            if ba is not None:
                rows += [[name, _fmt(m), _fmt(d)] for m, d in ba.points]
    return rows


PLOT_KINDS = ("scatter_counts", "scatter_volumes", "ba_counts", "ba_volumes")


def report_document(named_aggregates, config: Optional[ExperimentConfig] = None, folds=None) -> dict:
    """The JSON written to ``reports/aggregate.json``."""
    rows = [AblationRow(parse_combo(name), agg) for name, agg in named_aggregates]
    doc = {
        "config": None if config is None else config.to_dict(),
        "combos": [{"combo": name, "aggregate": agg.to_dict()} for name, agg in named_aggregates],
        "ranking": rank_columns(rows),
        "region_ranking": {},
    }
    for region in region_names(named_aggregates):
        sub = [AblationRow(r.combo, r.aggregate.regions[region]) for r in rows if region in r.aggregate.regions]
        doc["region_ranking"][region] = rank_columns(sub)
    if folds is not None:
        doc["folds"] = {name: [f.to_dict() for f in fs] for name, fs in folds.items()}
    return doc


def write_reports(named_aggregates, out_dir, config: Optional[ExperimentConfig] = None, folds=None,
                  plots: bool = True) -> Path:
    """Write aggregate.json, table1.csv, regions/*.csv and plots/*.csv (+ .png) under ``out_dir/reports``."""
    rep = Path(out_dir) / "reports"
    (rep / "regions").mkdir(parents=True, exist_ok=True)
    (rep / "plots").mkdir(parents=True, exist_ok=True)
    doc = report_document(named_aggregates, config, folds)
    (rep / "aggregate.json").write_text(json.dumps(doc, indent=2, allow_nan=True) + "\n")
    (rep / "table1.csv").write_text(csv_text(table1_rows(named_aggregates)))
    for region in region_names(named_aggregates):
        sub = [(name, agg.regions[region]) for name, agg in named_aggregates if region in agg.regions]
        (rep / "regions" / f"{slugify(region)}.csv").write_text(csv_text(table1_rows(sub)))
    for kind in PLOT_KINDS:
        (rep / "plots" / f"{kind}.csv").write_text(csv_text(plot_rows(named_aggregates, kind)))
    if plots:
        from .plotting import render_all

        render_all(named_aggregates, rep / "plots")
    return rep


def ablation_to_reports(rows: Sequence[AblationRow], out_dir, config=None, plots: bool = True) -> Path:
    named = [(r.name, r.aggregate) for r in rows]
    return write_reports(named, out_dir, config, {r.name: r.folds for r in rows}, plots)
