"""Evaluation metrics: image/pixel AUROC, AUPR, F1max, and per-region AUPRO.

Threshold semantics are pinned so values are reproducible: predictions are
positive when score >= threshold; thresholds sweep the unique observed
scores (exact, no binning); AUROC counts ties as 1/2 (Mann-Whitney); AUPR is
step-wise average precision, not interpolated. AUPRO integrates mean
per-region overlap over the false-positive rate up to fpr_limit (trapezoid,
linear interpolation at the limit crossing) and normalizes by the limit;
connected components use 8-connectivity.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .validation import check_labels_binary

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _checked(labels, scores):
    y = check_labels_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValidationError(f"scores shape {s.shape} != labels shape {y.shape}")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores contain non-finite values")
    return y, s


def auroc(labels, scores) -> float:
    """Probability a random positive outscores a random negative, ties count 1/2."""
    y, s = _checked(labels, scores)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC undefined: both classes must be present")
    order = np.argsort(s, kind="mergesort")
    sorted_scores = s[order]
    ranks = np.empty(y.size, dtype=np.float64)
    # average ranks over tied groups (1-based)
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _threshold_counts(y, s):
    """Cumulative TP/FP at each unique descending threshold (score >= t)."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last_of_group = np.nonzero(np.diff(s_sorted, append=-np.inf) != 0.0)[0]
    return tp[last_of_group], fp[last_of_group], s_sorted[last_of_group]


def aupr(labels, scores) -> float:
    """Step-wise average precision over descending unique thresholds."""
    y, s = _checked(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValidationError("AUPR undefined: at least one positive required")
    tp, fp, _ = _threshold_counts(y, s)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def f1_max(labels, scores) -> float:
    """Maximum F1 over thresholds at the unique observed scores."""
    y, s = _checked(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValidationError("F1max undefined: at least one positive required")
    tp, fp, _ = _threshold_counts(y, s)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return float(f1.max())


def _pro_fpr_curve(maps, masks, thresholds):
    """(fpr, mean-PRO) points at the given descending thresholds."""
    regions = []  # per region: sorted scores inside the region
    normal_scores = []
    for m, mask in zip(maps, masks):
        labeled, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
        for rid in range(1, count + 1):
            inside = m[labeled == rid]
            regions.append((np.sort(inside), inside.size))
        normal_scores.append(m[mask == 0])
    if not regions:
        raise ValidationError("AUPRO undefined: no anomalous regions in the mask set")
    normal = np.sort(np.concatenate(normal_scores))
    n_normal = normal.size
    if n_normal == 0:
        raise ValidationError("AUPRO undefined: no normal pixels")
    fprs = np.empty(thresholds.size)
    pros = np.empty(thresholds.size)
    for ti, t in enumerate(thresholds):
        # count of values >= t via searchsorted on ascending arrays
        fprs[ti] = (n_normal - np.searchsorted(normal, t, side="left")) / n_normal
        overlaps = [
            (size - np.searchsorted(sorted_scores, t, side="left")) / size
            for sorted_scores, size in regions
        ]
        pros[ti] = float(np.mean(overlaps))
    return fprs, pros


def _integrate_to_limit(fprs, pros, fpr_limit: float) -> float:
    """Trapezoidal area of PRO over FPR in [0, fpr_limit], normalized by the limit."""
    # prepend the empty-prediction endpoint
    fprs = np.concatenate([[0.0], fprs])
    pros = np.concatenate([[0.0], pros])
    area = 0.0
    for i in range(1, fprs.size):
        x0, x1 = fprs[i - 1], fprs[i]
        y0, y1 = pros[i - 1], pros[i]
        if x1 <= fpr_limit:
            area += (x1 - x0) * (y0 + y1) / 2.0
        else:
            if x0 < fpr_limit:
                # linear interpolation of PRO at the limit crossing
                yt = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
                area += (fpr_limit - x0) * (y0 + yt) / 2.0
            break
    return area / fpr_limit


def aupro(maps, masks, fpr_limit: float = 0.3, bins: int | None = None) -> float:
    """Per-region overlap integrated over FPR up to fpr_limit, normalized.

    maps and masks are parallel lists of full-resolution rasters. With
    bins=N, thresholds are N evenly spaced values over the observed score
    range instead of every unique score (fast path; agrees within ~1e-3).
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValidationError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [(np.asarray(k) != 0).astype(np.uint8) for k in masks]
    if len(maps) != len(masks) or not maps:
        raise ValidationError("aupro requires parallel non-empty map/mask lists")
    for m, k in zip(maps, masks):
        if m.shape != k.shape:
            raise ValidationError(f"map shape {m.shape} != mask shape {k.shape}")
    all_scores = np.concatenate([m.ravel() for m in maps])
    if bins is None:
        thresholds = np.unique(all_scores)[::-1]
    else:
        lo, hi = float(all_scores.min()), float(all_scores.max())
        thresholds = np.linspace(hi, lo, max(2, bins))
    fprs, pros = _pro_fpr_curve(maps, masks, thresholds)
    return _integrate_to_limit(fprs, pros, fpr_limit)


IMAGE_METRICS = ("I-AUROC", "I-AUPR", "I-F1max")
PIXEL_METRICS = ("P-AUROC", "P-AUPR", "P-F1max", "P-AUPRO")
ALL_METRICS = IMAGE_METRICS + PIXEL_METRICS


@dataclass(eq=False)
class MetricsReport:
    """Per-class and mean metric values in [0,1], plus the config that made them."""

    per_class: dict[str, dict[str, float]]
    counts: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def mean_row(self) -> dict[str, float]:
        out = {}
        for metric in ALL_METRICS:
            values = [
                row[metric]
                for row in self.per_class.values()
                if metric in row and row[metric] is not None
            ]
            if values:
                out[metric] = float(np.mean(values))
        return out

    def to_json(self) -> dict:
        return {
            "per_class": self.per_class,
            "mean": self.mean_row,
            "counts": self.counts,
            "config": self.config,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["category", *ALL_METRICS])
        for cls in sorted(self.per_class):
            row = self.per_class[cls]
            writer.writerow([cls, *[_fmt(row.get(m)) for m in ALL_METRICS]])
        mean = self.mean_row
        writer.writerow(["mean", *[_fmt(mean.get(m)) for m in ALL_METRICS]])
        return buf.getvalue()


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def compute_class_metrics(
    image_labels,
    image_scores,
    pixel_masks=None,
    pixel_maps=None,
    fpr_limit: float = 0.3,
    aupro_bins: int | None = None,
) -> dict[str, float]:
    """All metrics for one class; pixel metrics need parallel mask/map lists."""
    out = {
        "I-AUROC": auroc(image_labels, image_scores),
        "I-AUPR": aupr(image_labels, image_scores),
        "I-F1max": f1_max(image_labels, image_scores),
    }
    if pixel_masks is not None and pixel_maps is not None and len(pixel_masks):
        flat_labels = np.concatenate([(np.asarray(m) != 0).ravel() for m in pixel_masks]).astype(int)
        flat_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in pixel_maps])
        out["P-AUROC"] = auroc(flat_labels, flat_scores)
        out["P-AUPR"] = aupr(flat_labels, flat_scores)
        out["P-F1max"] = f1_max(flat_labels, flat_scores)
        out["P-AUPRO"] = aupro(pixel_maps, pixel_masks, fpr_limit, bins=aupro_bins)
    return out
