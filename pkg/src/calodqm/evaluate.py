"""Classification metrics and report artifacts.

Pure, order-independent metric functions plus the report bundle:
spatial error heatmaps, healthy-vs-anomalous histograms, the per-channel
training mean-error map (contamination diagnostic), and a plain
proximity report for high-scoring healthy channels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import SegmentationMap


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC with ties counted half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # average ranks over tie groups
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ConfusionRates:
    fpr: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int


def confusion_rates(flags: np.ndarray, labels: np.ndarray) -> ConfusionRates:
    """Zero-denominator rates are reported as None, not 0."""
    flags = np.asarray(flags, dtype=bool).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if flags.shape != labels.shape:
        raise ValueError("flags and labels must align")
    tp = int(np.sum(flags & labels))
    fp = int(np.sum(flags & ~labels))
    tn = int(np.sum(~flags & ~labels))
    fn = int(np.sum(~flags & labels))
    fpr = fp / (fp + tn) if (fp + tn) else None
    precision = tp / (tp + fp) if (tp + fp) else None
    recall = tp / (tp + fn) if (tp + fn) else None
    return ConfusionRates(fpr, precision, recall, tp, fp, tn, fn)


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["kind", "rd", "capture", "fpr", "precision", "recall", "auc"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})
    return path


def nearest_injected_distance(
    healthy_bins: np.ndarray, injected_bins: np.ndarray
) -> np.ndarray:
    """Euclidean bin-space distance from each healthy cell to the nearest
    injected cell."""
    if len(injected_bins) == 0:
        return np.full(len(healthy_bins), np.inf)
    diff = healthy_bins[:, None, :].astype(float) - injected_bins[None, :, :].astype(float)
    return np.sqrt((diff**2).sum(axis=-1)).min(axis=1)


def proximity_report(
    scores: np.ndarray,
    labels: np.ndarray,
    geometry: SegmentationMap,
    top_k: int = 20,
) -> list[dict]:
    """Healthy channels with the highest scores and their distance to the
    nearest injected cell, per window."""
    rows = []
    n_windows = scores.shape[0]
    for w in range(n_windows):
        s = scores[w]
        lab = labels[w]
        healthy = geometry.valid_mask & ~lab
        healthy_bins = np.argwhere(healthy)
        injected_bins = np.argwhere(lab & geometry.valid_mask)
        if len(healthy_bins) == 0:
            continue
        vals = s[healthy]
        top = np.argsort(vals)[::-1][:top_k]
        dists = nearest_injected_distance(healthy_bins[top], injected_bins)
        for rank, (idx, dist) in enumerate(zip(top, dists)):
            i, j, k = healthy_bins[idx]
            rows.append(
                {
                    "window": w,
                    "rank": rank,
                    "ieta": int(geometry.ieta_values[i]),
                    "iphi": int(j) + 1,
                    "depth": int(k) + 1,
                    "score": float(vals[idx]),
                    "dist_to_nearest_injected": float(dist),
                }
            )
    return rows


def error_reports(
    out_dir: str | Path,
    scores: np.ndarray,  # (n_windows, dims)
    errors: np.ndarray,  # (n_windows, dims)
    labels: np.ndarray,  # bool (n_windows, dims)
    geometry: SegmentationMap,
    train_mean_error: Optional[np.ndarray] = None,
    tag: str = "eval",
) -> dict:
    """Emit the report bundle; returns the arrays the images were drawn
    from so callers can verify values round-trip."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    plots = out_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    bundle: dict = {}

    # (a) per-depth spatial error heatmaps for the first window
    w0 = errors[0]
    for depth in range(geometry.dims[2]):
        fig, ax = plt.subplots(figsize=(6, 4))
        im = ax.imshow(w0[:, :, depth], aspect="auto", origin="lower")
        ax.set_xlabel("iphi bin")
        ax.set_ylabel("ieta bin")
        ax.set_title(f"window MAE, depth {depth + 1}")
        fig.colorbar(im, ax=ax)
        fig.savefig(plots / f"{tag}_error_map_depth{depth + 1}.png", dpi=100)
        plt.close(fig)
    bundle["heatmap_depth1"] = w0[:, :, 0]

    # (b) healthy vs anomalous error histograms
    valid = geometry.valid_mask
    healthy_err = errors[:, valid][~labels[:, valid]]
    anom_err = errors[:, valid][labels[:, valid]]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(healthy_err, bins=50, alpha=0.6, label="healthy", density=True)
    if anom_err.size:
        ax.hist(anom_err, bins=50, alpha=0.6, label="anomalous", density=True)
    ax.set_xlabel("window MAE")
    ax.set_yscale("log")
    ax.legend()
    fig.savefig(plots / f"{tag}_error_hist.png", dpi=100)
    plt.close(fig)
    bundle["healthy_errors"] = healthy_err
    bundle["anomalous_errors"] = anom_err

    # (c) training-set per-channel mean error map
    if train_mean_error is not None:
        for depth in range(geometry.dims[2]):
            fig, ax = plt.subplots(figsize=(6, 4))
            im = ax.imshow(train_mean_error[:, :, depth], aspect="auto", origin="lower")
            ax.set_title(f"train mean MAE, depth {depth + 1}")
            fig.colorbar(im, ax=ax)
            fig.savefig(plots / f"{tag}_train_mean_error_depth{depth + 1}.png", dpi=100)
            plt.close(fig)
        bundle["train_mean_error"] = train_mean_error

    # (d) proximity report
    rows = proximity_report(scores, labels, geometry)
    prox_path = out_dir / f"{tag}_proximity.csv"
    with open(prox_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "window",
                "rank",
                "ieta",
                "iphi",
                "depth",
                "score",
                "dist_to_nearest_injected",
            ],
        )
        writer.writeheader()
        writer.writerows(rows)
    bundle["proximity_rows"] = rows
    return bundle
