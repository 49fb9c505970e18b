"""Detection, volumetric, ranking, distance and agreement metrics.

Undefined values (empty denominators, single-class ground truth, ...) are
reported as ``None`` in reports and excluded from subject averages; the
functions themselves raise :class:`UndefinedMetricError`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .errors import ConfigError, DomainError, ShapeError, UndefinedMetricError, ValidationError
from .lesion import LesionSet, match_lesions
from .volume_io import LabelVolume, Volume

# metrics averaged over subjects, in table column order
SUBJECT_METRICS = (
    "sensitivity",
    "precision",
    "magnitude_accuracy",
    "volumetric_similarity",
    "auc",
    "hausdorff_mm",
    "mahalanobis",
)
LOWER_IS_BETTER = {"hausdorff_mm", "mahalanobis"}
UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class MatchCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise DomainError("counts must be non-negative")


def magnitude_accuracy(sensitivity: float, precision: float) -> float:
    return math.sqrt(sensitivity**2 + precision**2)


def detection_metrics(counts: MatchCounts):
    """(sensitivity, precision, magnitude accuracy); an undefined entry is None."""
    if counts.tp + counts.fn == 0 and counts.tp + counts.fp == 0:
        raise UndefinedMetricError("no ground-truth and no predicted lesions")
    s = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else None
    a = magnitude_accuracy(s, p) if s is not None and p is not None else None
    return s, p, a


def volumetric_similarity(vol_pred: float, vol_gt: float) -> float:
    if vol_pred < 0 or vol_gt < 0:
        raise DomainError("volumes must be non-negative")
    if vol_pred + vol_gt == 0:
        return 1.0
    return 1.0 - abs(vol_pred - vol_gt) / (vol_pred + vol_gt)


def roc_auc(prob, gt, eval_mask=None) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count one half)."""
    scores = np.asarray(prob.data if isinstance(prob, Volume) else prob, dtype=np.float64)
    labels = np.asarray(gt.data if isinstance(gt, Volume) else gt) > 0
    if scores.shape != labels.shape:
        raise ShapeError("probability and ground truth shapes differ")
    if eval_mask is not None:
        sel = np.asarray(eval_mask.data if isinstance(eval_mask, Volume) else eval_mask) > 0
        scores, labels = scores[sel], labels[sel]
    scores, labels = scores.ravel(), labels.ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes inside the evaluation mask")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _directed(a, b):
    tree = cKDTree(b)
    k = min(3, len(b))
    _, idx = tree.query(a, k=k)
    idx = idx.reshape(len(a), k)
    # recompute candidate distances directly so results do not depend on tree internals
    d = np.sqrt(((a[:, None, :] - b[idx]) ** 2).sum(axis=-1))
    return d.min(axis=1).max()


def hausdorff(points_a, points_b) -> float:
    """Symmetric Hausdorff distance between two (n, 3) point sets."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("Hausdorff distance of an empty point set")
    return float(max(_directed(a, b), _directed(b, a)))


def mahalanobis(pred_coms, gt_coms, ridge: float = 1e-6) -> float:
    """Mean Mahalanobis distance of predicted points to the ground-truth point distribution."""
    gt = np.asarray(gt_coms, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(pred_coms, dtype=np.float64).reshape(-1, 3)
    if len(gt) < 4:
        raise UndefinedMetricError("need at least 4 ground-truth points for a 3D covariance")
    if len(pred) == 0:
        raise UndefinedMetricError("no predicted points")
    mu = gt.mean(axis=0)
    cov = np.cov(gt, rowvar=False, bias=True) + ridge * np.eye(3)
    diff = pred - mu
    sol = np.linalg.solve(cov, diff.T).T
    q = np.einsum("ij,ij->i", diff, sol)
    return float(np.sqrt(np.maximum(q, 0.0)).mean())


def _pair(series_a, series_b, min_len):
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("series must be 1D and of equal length")
    if len(a) < min_len:
        raise ValidationError(f"need at least {min_len} paired values")
    return a, b


def icc(series_a, series_b) -> float:
    """One-way random-effects ICC(1,1) for two measurements per subject."""
    a, b = _pair(series_a, series_b, 3)
    x = np.column_stack([a, b])
    n, k = x.shape
    row_means = x.mean(axis=1)
    grand = x.mean()
    ss_between = k * ((row_means - grand) ** 2).sum()
    ss_within = ((x - row_means[:, None]) ** 2).sum()
    if ss_between + ss_within == 0:
        raise UndefinedMetricError("ICC undefined for zero total variance")
    bms = ss_between / (n - 1)
    wms = ss_within / (n * (k - 1))
    return float((bms - wms) / (bms + (k - 1) * wms))


@dataclass
class BlandAltman:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    points: list  # [((a + b) / 2, a - b), ...]

    def to_dict(self):
        return {
            "mean_diff": self.mean_diff,
            "sd_diff": self.sd_diff,
            "loa_low": self.loa_low,
            "loa_high": self.loa_high,
            "points": [list(p) for p in self.points],
        }


def bland_altman(series_a, series_b) -> BlandAltman:
    a, b = _pair(series_a, series_b, 2)
    d = a - b
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1))
    points = [(float(m), float(v)) for m, v in zip((a + b) / 2.0, d)]
    return BlandAltman(mean_d, sd, mean_d - 1.96 * sd, mean_d + 1.96 * sd, points)


def scatter_and_correlation(series_a, series_b):
    """Paired points and Pearson's r."""
    a, b = _pair(series_a, series_b, 3)
    am, bm = a - a.mean(), b - b.mean()
    saa, sbb = float(am @ am), float(bm @ bm)
    if saa == 0 or sbb == 0:
        raise UndefinedMetricError("correlation undefined for a constant series")
    r = float(am @ bm) / math.sqrt(saa * sbb)
    return [(float(x), float(y)) for x, y in zip(a, b)], r


# -- per-subject reports ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    max_dist_mm: float = 3.0
    hausdorff_points: str = "com"  # "com" (lesion centers) or "voxels"
    mahalanobis_ridge: float = 1e-6

    def __post_init__(self):
        if self.hausdorff_points not in ("com", "voxels"):
            raise ConfigError("hausdorff_points must be 'com' or 'voxels'")
        if self.max_dist_mm <= 0:
            raise ConfigError("max_dist_mm must be positive")


@dataclass
class MetricsReport:
    sensitivity: Optional[float] = None
    precision: Optional[float] = None
    magnitude_accuracy: Optional[float] = None
    volumetric_similarity: Optional[float] = None
    auc: Optional[float] = None
    hausdorff_mm: Optional[float] = None
    mahalanobis: Optional[float] = None
    lesion_count_pred: int = 0
    lesion_count_gt: int = 0
    volume_pred_vox: int = 0
    volume_gt_vox: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    regions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "regions"}
        d["regions"] = {k: v.to_dict() for k, v in self.regions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        regions = {k: cls.from_dict(v) for k, v in d.pop("regions", {}).items()}
        return cls(**d, regions=regions)


def _try(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return None


def evaluate_lesions(pred_set: LesionSet, gt_set: LesionSet, prob=None, gt_mask=None,
                     eval_mask=None, config: EvalConfig = EvalConfig()) -> MetricsReport:
    """All per-subject metrics for a prediction/ground-truth lesion pair.

    ``prob`` (probability array/volume) feeds the AUC; without it the binary
    prediction mask is ranked instead.  ``gt_mask`` defaults to the union of
    ground-truth lesions; ``eval_mask`` restricts the voxels ranked by AUC.
    """
    match = match_lesions(pred_set, gt_set, config.max_dist_mm)
    rep = MetricsReport(
        lesion_count_pred=len(pred_set),
        lesion_count_gt=len(gt_set),
        volume_pred_vox=pred_set.total_voxels,
        volume_gt_vox=gt_set.total_voxels,
        tp=match.tp,
        fp=match.fp,
        fn=match.fn,
    )
    det = _try(detection_metrics, MatchCounts(match.tp, match.fp, match.fn))
    if det is not None:
        rep.sensitivity, rep.precision, rep.magnitude_accuracy = det
    rep.volumetric_similarity = volumetric_similarity(rep.volume_pred_vox, rep.volume_gt_vox)

    scores = pred_set.mask().astype(np.float64) if prob is None else (prob.data if isinstance(prob, Volume) else prob)
    truth = gt_set.mask() if gt_mask is None else gt_mask
    rep.auc = _try(roc_auc, scores, truth, eval_mask)

    if config.hausdorff_points == "com":
        pa, pb = pred_set.coms_mm(), gt_set.coms_mm()
    else:
        pa, pb = pred_set.voxel_points_mm(), gt_set.voxel_points_mm()
    rep.hausdorff_mm = _try(hausdorff, pa, pb)
    rep.mahalanobis = _try(mahalanobis, pred_set.coms_mm(), gt_set.coms_mm(), config.mahalanobis_ridge)
    return rep


def assign_regions(lesion_set: LesionSet, regions: LabelVolume) -> dict:
    """Lesion id -> region name, using the label at the lesion's rounded COM voxel."""
    labels = regions.data
    hi = np.array(labels.shape) - 1
    out = {}
    for les in lesion_set:
        idx = np.clip(np.rint(les.com_vox).astype(int), 0, hi)
        lab = int(labels[tuple(idx)])
        out[les.id] = regions.label_names.get(lab, f"label_{lab}") if lab else UNASSIGNED
    return out


def region_label_map(regions: LabelVolume) -> dict:
    """Region name -> label ids, named regions first, ``unassigned`` (label 0) last."""
    present = {int(l) for l in np.unique(regions.data) if l}
    out = {}
    for lab in sorted(present | set(regions.label_names)):
        out.setdefault(regions.label_names.get(lab, f"label_{lab}"), []).append(lab)
    out[UNASSIGNED] = [0]
    return out


def regional_breakdown(pred_set: LesionSet, gt_set: LesionSet, regions: LabelVolume, prob=None,
                       gt_mask=None, config: EvalConfig = EvalConfig()) -> dict:
    """Region name -> report, each lesion counted in the region holding its COM."""
    if tuple(regions.dims) != tuple(gt_set.dims) or not pred_set.same_geometry(gt_set):
        raise ShapeError("regions, prediction and ground truth must share geometry")
    pred_region = assign_regions(pred_set, regions)
    gt_region = assign_regions(gt_set, regions)
    truth = gt_set.mask() if gt_mask is None else gt_mask
    out = {}
    for name, labels in region_label_map(regions).items():
        out[name] = evaluate_lesions(
            pred_set.subset([i for i, r in pred_region.items() if r == name]),
            gt_set.subset([i for i, r in gt_region.items() if r == name]),
            prob=prob,
            gt_mask=truth,
            eval_mask=np.isin(regions.data, labels),
            config=config,
        )
    return out


# -- aggregation -------------------------------------------------------------------------


@dataclass
class Summary:
    mean: Optional[float]
    se: Optional[float]
    n: int

    def to_dict(self):
        return {"mean": self.mean, "se": self.se, "n": self.n}


def summarize(values) -> Summary:
    """Mean and standard error (sample sd / sqrt(n)) over the defined values."""
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return Summary(None, None, 0)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return Summary(float(vals.mean()), se, int(vals.size))


@dataclass
class AggregateReport:
    n_subjects: int
    metrics: dict  # name -> Summary
    magnitude_accuracy_of_means: Optional[float]
    icc_lesions: Optional[float]
    icc_volume: Optional[float]
    bland_altman_counts: Optional[BlandAltman]
    bland_altman_volumes: Optional[BlandAltman]
    scatter_counts: list
    scatter_volumes: list
    pearson_counts: Optional[float]
    pearson_volumes: Optional[float]
    regions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "magnitude_accuracy_of_means": self.magnitude_accuracy_of_means,
            "icc_lesions": self.icc_lesions,
            "icc_volume": self.icc_volume,
            "bland_altman_counts": self.bland_altman_counts and self.bland_altman_counts.to_dict(),
            "bland_altman_volumes": self.bland_altman_volumes and self.bland_altman_volumes.to_dict(),
            "scatter_counts": {"points": [list(p) for p in self.scatter_counts], "r": self.pearson_counts},
            "scatter_volumes": {"points": [list(p) for p in self.scatter_volumes], "r": self.pearson_volumes},
            "regions": {k: v.to_dict() for k, v in self.regions.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateReport":
        def ba(x):
            return None if x is None else BlandAltman(**{**x, "points": [tuple(p) for p in x["points"]]})

        return cls(
            n_subjects=d["n_subjects"],
            metrics={k: Summary(**v) for k, v in d["metrics"].items()},
            magnitude_accuracy_of_means=d["magnitude_accuracy_of_means"],
            icc_lesions=d["icc_lesions"],
            icc_volume=d["icc_volume"],
            bland_altman_counts=ba(d["bland_altman_counts"]),
            bland_altman_volumes=ba(d["bland_altman_volumes"]),
            scatter_counts=[tuple(p) for p in d["scatter_counts"]["points"]],
            scatter_volumes=[tuple(p) for p in d["scatter_volumes"]["points"]],
            pearson_counts=d["scatter_counts"]["r"],
            pearson_volumes=d["scatter_volumes"]["r"],
            regions={k: cls.from_dict(v) for k, v in d.get("regions", {}).items()},
        )


def _agreement(pred, gt):
    ba = bland_altman(pred, gt) if len(pred) >= 2 else None
    points = [(float(x), float(y)) for x, y in zip(pred, gt)]
    r = _try(lambda: scatter_and_correlation(pred, gt)[1]) if len(pred) >= 3 else None
    i = _try(icc, pred, gt) if len(pred) >= 3 else None
    return ba, points, r, i


def aggregate_subjects(reports: Sequence[MetricsReport], with_regions: bool = True) -> AggregateReport:
    """Average per-subject reports; undefined entries are excluded metric by metric."""
    if not reports:
        raise ConfigError("cannot aggregate an empty list of reports")
    metrics = {name: summarize([getattr(r, name) for r in reports]) for name in SUBJECT_METRICS}
    s, p = metrics["sensitivity"].mean, metrics["precision"].mean
    counts_pred = [r.lesion_count_pred for r in reports]
    counts_gt = [r.lesion_count_gt for r in reports]
    vol_pred = [r.volume_pred_vox for r in reports]
    vol_gt = [r.volume_gt_vox for r in reports]
    ba_c, sc_c, r_c, icc_c = _agreement(counts_pred, counts_gt)
    ba_v, sc_v, r_v, icc_v = _agreement(vol_pred, vol_gt)
    agg = AggregateReport(
        n_subjects=len(reports),
        metrics=metrics,
        magnitude_accuracy_of_means=magnitude_accuracy(s, p) if s is not None and p is not None else None,
        icc_lesions=icc_c,
        icc_volume=icc_v,
        bland_altman_counts=ba_c,
        bland_altman_volumes=ba_v,
        scatter_counts=sc_c,
        scatter_volumes=sc_v,
        pearson_counts=r_c,
        pearson_volumes=r_v,
    )
    if with_regions:
        names = []
        for r in reports:
            names.extend(n for n in r.regions if n not in names)
        for name in names:
            sub = [r.regions[name] for r in reports if name in r.regions]
            agg.regions[name] = aggregate_subjects(sub, with_regions=False)
    return agg
