"""Figures for the report path: agreement scatter, Bland-Altman, sensitivity vs precision.

Only the non-interactive Agg backend is used; every function writes a PNG
and returns its path.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LABELS = {"counts": "lesion count", "volumes": "lesion volume (voxels)"}


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def scatter_plot(named_aggregates, series, path):
    fig, ax = plt.subplots(figsize=(5, 5))
    lo, hi = np.inf, -np.inf
    for name, agg in named_aggregates:
        pts = np.array(getattr(agg, f"scatter_{series}"), dtype=float).reshape(-1, 2)
        if not len(pts):
            continue
        r = getattr(agg, f"pearson_{series}")
        label = name if r is None else f"{name} (r={r:.2f})"
        ax.plot(pts[:, 1], pts[:, 0], "o", ms=4, label=label)
        lo, hi = min(lo, pts.min()), max(hi, pts.max())
    if np.isfinite(lo):
        ax.plot([lo, hi], [lo, hi], "k-", alpha=0.4, lw=1)
    ax.set_xlabel(f"ground truth {LABELS[series]}")
    ax.set_ylabel(f"predicted {LABELS[series]}")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def bland_altman_plot(named_aggregates, series, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, agg in named_aggregates:
        ba = getattr(agg, f"bland_altman_{series}")
        if ba is None:
            continue
        pts = np.array(ba.points, dtype=float)
        line = ax.plot(pts[:, 0], pts[:, 1], "o", ms=4, label=name)[0]
        ax.axhline(ba.mean_diff, color=line.get_color(), lw=1)
        for y in (ba.loa_low, ba.loa_high):
            ax.axhline(y, color=line.get_color(), lw=1, ls="--")
    ax.set_xlabel(f"mean {LABELS[series]}")
    ax.set_ylabel("predicted - ground truth")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def sensitivity_precision_plot(named_aggregates, path):
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, agg in named_aggregates:
        s, p = agg.metrics["sensitivity"], agg.metrics["precision"]
        if s.mean is None or p.mean is None:
            continue
        ax.errorbar(s.mean, p.mean, xerr=s.se, yerr=p.se, fmt="o", ms=5, capsize=2, label=name)
    ax.set_xlim(0, 1.05)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("sensitivity")
    ax.set_ylabel("precision")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def render_all(named_aggregates, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for series in ("counts", "volumes"):
        paths.append(scatter_plot(named_aggregates, series, out / f"scatter_{series}.png"))
        paths.append(bland_altman_plot(named_aggregates, series, out / f"ba_{series}.png"))
    paths.append(sensitivity_precision_plot(named_aggregates, out / "sensitivity_precision.png"))
    return paths
