"""Crack path extraction and evaluation metrics.

A crack is the set of pixels whose final damage exceeds a high threshold.
The path is summarized per row as the mean column of the damaged pixels
(optionally of the widest damaged run only), median-then-polynomial smoothed
over the rows that contain damage, and linearly interpolated across the rows
that do not (held constant beyond the first/last damaged row).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter
from scipy.signal import savgol_filter

from .fields import GRID_SIZE

CRACK_THRESHOLD = 0.9
MEDIAN_WIDTH = 5
SAVGOL_WIDTH = 11
SAVGOL_ORDER = 2


class CrackPathError(ValueError):
    """No pixel exceeds the damage threshold."""


def binarize_damage(damage: np.ndarray,
                    threshold: float = CRACK_THRESHOLD) -> np.ndarray:
    d = np.asarray(damage, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"damage field must be 2-D, got shape {d.shape}")
    if not np.isfinite(d).all():
        raise ValueError("damage field contains non-finite values")
    return d > threshold


def _largest_run_mean(cols: np.ndarray) -> float:
    # cols: sorted damaged column indices of one row
    breaks = np.where(np.diff(cols) > 1)[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks + 1, [len(cols)]])
    lengths = ends - starts
    i = int(np.argmax(lengths))
    return float(cols[starts[i]:ends[i]].mean())


def raw_row_positions(mask: np.ndarray,
                      mode: str = "mean") -> np.ndarray:
    """Per-row crack column (NaN where the row has no damaged pixel)."""
    if mode not in ("mean", "largest"):
        raise ValueError(f"mode must be mean or largest, got {mode!r}")
    h = mask.shape[0]
    out = np.full(h, np.nan)
    for y in range(h):
        cols = np.nonzero(mask[y])[0]
        if cols.size == 0:
            continue
        out[y] = cols.mean() if mode == "mean" else _largest_run_mean(cols)
    return out


def smooth_series(values: np.ndarray, median_width: int = MEDIAN_WIDTH,
                  savgol_width: int = SAVGOL_WIDTH,
                  savgol_order: int = SAVGOL_ORDER) -> np.ndarray:
    """Median filter then polynomial smoothing; both windows shrink for
    short series so the call stays valid."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n == 0:
        raise ValueError("cannot smooth an empty series")
    mw = min(median_width, n if n % 2 else n - 1)
    if mw >= 2:
        v = median_filter(v, size=mw, mode="nearest")
    sw = min(savgol_width, n if n % 2 else n - 1)
    order = min(savgol_order, max(sw - 1, 0))
    if sw >= 3 and order >= 1:
        # mean-centered so a constant series comes back bit-exact
        c = v.mean()
        v = savgol_filter(v - c, window_length=sw, polyorder=order) + c
    return v


@dataclass
class CrackPath:
    """Column position per row plus the rows that actually held damage."""

    positions: np.ndarray
    valid: np.ndarray
    threshold: float

    def coverage(self) -> float:
        return float(self.valid.mean())


def extract_crack_path(damage: np.ndarray,
                       threshold: float = CRACK_THRESHOLD,
                       mode: str = "mean",
                       smooth: bool = True) -> CrackPath:
    """Damage field -> per-row crack column positions.

    Smoothing runs on the damaged rows compacted together (gaps removed so
    the filters never mix real positions with fill values); the gaps are then
    filled by linear interpolation and the ends held constant.
    """
    mask = binarize_damage(damage, threshold)
    raw = raw_row_positions(mask, mode=mode)
    valid = ~np.isnan(raw)
    if not valid.any():
        raise CrackPathError(
            f"no damage above threshold {threshold}")
    compact = raw[valid]
    if smooth:
        compact = smooth_series(compact)
    rows = np.arange(raw.size, dtype=np.float64)
    positions = np.interp(rows, rows[valid], compact)
    # polynomial smoothing can overshoot at the ends; positions are columns
    positions = np.clip(positions, 0.0, mask.shape[1] - 1.0)
    return CrackPath(positions=positions, valid=valid, threshold=threshold)


# --------------------------------------------------------------------------
# metrics


def percent_rmse_path(path_a: np.ndarray, path_b: np.ndarray,
                      width: int = GRID_SIZE) -> float:
    """RMS column error as a percentage of the image width."""
    a = np.asarray(path_a, dtype=np.float64)
    b = np.asarray(path_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"path lengths differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean(((a - b) / width) ** 2)) * 100.0)


def rmse_curve(pred: np.ndarray, true: np.ndarray) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"curve lengths differ: {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def percent_rmse_curve(pred: np.ndarray, true: np.ndarray,
                       pred_strains: np.ndarray | None = None,
                       true_strains: np.ndarray | None = None) -> float:
    """Curve RMSE as a percentage of the reference peak; when strain grids
    are given they must agree point by point."""
    if (pred_strains is None) != (true_strains is None):
        raise ValueError("provide both strain grids or neither")
    if pred_strains is not None:
        ps = np.asarray(pred_strains, dtype=np.float64)
        ts = np.asarray(true_strains, dtype=np.float64)
        if ps.shape != ts.shape or not np.allclose(ps, ts, atol=1e-12):
            raise ValueError("strain grids are not aligned")
    t = np.asarray(true, dtype=np.float64)
    peak = float(np.abs(t).max())
    if peak <= 0:
        raise ValueError("reference curve has no positive peak")
    return rmse_curve(pred, t) / peak * 100.0


def stress_field_percent_rmse(pred: np.ndarray, true: np.ndarray) -> float:
    """Field RMSE as a percentage of the reference field's peak magnitude."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"field shapes differ: {p.shape} vs {t.shape}")
    peak = float(np.abs(t).max())
    if peak <= 0:
        raise ValueError("reference field has no positive peak")
    return float(np.sqrt(np.mean((p - t) ** 2)) / peak * 100.0)


# --------------------------------------------------------------------------
# cohort summaries


@dataclass
class CaseRecord:
    case_id: str
    curve_rmse_pct: float
    path_rmse_pct: float | None = None


def write_records(records: list[CaseRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "curve_rmse_pct", "path_rmse_pct"])
        for r in records:
            w.writerow([r.case_id, f"{r.curve_rmse_pct:.6f}",
                        "" if r.path_rmse_pct is None
                        else f"{r.path_rmse_pct:.6f}"])
    return path


def fraction_below(records: list[CaseRecord], limit: float) -> float:
    if not records:
        raise ValueError("no records")
    return sum(r.curve_rmse_pct < limit for r in records) / len(records)


def summarize(records: list[CaseRecord], out_dir,
              curves: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]
              | None = None) -> dict:
    """Write the record table, an error histogram, and (when curves are
    given as case_id -> (strains, pred, true)) overlays for the best, median
    and worst cases. Returns the summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(records, out_dir / "case_metrics.csv")

    errors = np.array([r.curve_rmse_pct for r in records])
    summary = {
        "n_cases": len(records),
        "mean_curve_rmse_pct": float(errors.mean()),
        "median_curve_rmse_pct": float(np.median(errors)),
        "max_curve_rmse_pct": float(errors.max()),
        "fraction_below_5pct": fraction_below(records, 5.0),
        "fraction_below_10pct": fraction_below(records, 10.0),
        "fraction_below_20pct": fraction_below(records, 20.0),
    }

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(errors, bins=min(20, max(5, len(records))), color="steelblue")
    ax.set_xlabel("curve RMSE (% of peak)")
    ax.set_ylabel("cases")
    fig.tight_layout()
    fig.savefig(out_dir / "error_histogram.png", dpi=120)
    plt.close(fig)

    if curves:
        order = np.argsort(errors)
        picks = {"best": order[0], "median": order[len(order) // 2],
                 "worst": order[-1]}
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.5), sharey=True)
        for ax, (label, idx) in zip(axes, picks.items()):
            rec = records[int(idx)]
            if rec.case_id not in curves:
                continue
            strains, pred, true = curves[rec.case_id]
            ax.plot(strains, true, label="reference", color="black")
            ax.plot(strains, pred, label="surrogate", color="crimson",
                    linestyle="--")
            ax.set_title(f"{label}: {rec.case_id} "
                         f"({rec.curve_rmse_pct:.1f}%)")
            ax.set_xlabel("strain")
        axes[0].set_ylabel("macro stress (MPa)")
        axes[0].legend()
        fig.tight_layout()
        fig.savefig(out_dir / "curve_overlays.png", dpi=120)
        plt.close(fig)
    return summary
