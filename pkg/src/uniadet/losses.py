"""Training losses: cross-entropy for the classification head, focal and
soft-Dice for the segmentation head, plus mask-to-grid alignment.

Probabilities are clamped to [EPS, 1-EPS] inside logarithms and divisions
only, so losses stay finite while gradients keep their sign at saturation.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .validation import check_same_shape

EPS = 1e-7


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, EPS, 1.0 - EPS)


def cross_entropy_loss(anomaly_prob: float, label: int) -> float:
    """Binary cross-entropy of the anomaly probability against the image label."""
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    p = float(np.clip(anomaly_prob, EPS, 1.0 - EPS))
    return -label * np.log(p) - (1 - label) * np.log(1.0 - p)


def focal_loss(prob_map, mask, gamma: float = 2.0, alpha: float = 1.0) -> float:
    """Mean focal loss over the grid: -alpha * (1 - p_t)^gamma * ln(p_t).

    p_t is the predicted probability of the true class; gamma = 0 reduces to
    plain per-pixel cross-entropy.
    """
    p = np.asarray(prob_map, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    check_same_shape(p, m, "focal loss prob/mask")
    p_t = np.where(m > 0.5, p, 1.0 - p)
    loss = -alpha * (1.0 - p_t) ** gamma * np.log(_clamp(p_t))
    return float(loss.mean())


def focal_loss_grad(prob_map, mask, gamma: float = 2.0, alpha: float = 1.0) -> np.ndarray:
    """d(mean focal loss)/d(prob_map), elementwise."""
    p = np.asarray(prob_map, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    check_same_shape(p, m, "focal loss prob/mask")
    pc = _clamp(p)
    pos = alpha * (gamma * (1.0 - p) ** (gamma - 1.0) * np.log(pc) - (1.0 - p) ** gamma / pc)
    neg = alpha * (-gamma * p ** (gamma - 1.0) * np.log(_clamp(1.0 - p)) + p**gamma / _clamp(1.0 - p))
    grad = np.where(m > 0.5, pos, neg)
    return grad / p.size


def dice_loss(prob_map, mask, smooth: float = 1.0) -> float:
    """Soft-Dice loss: 1 - (2*sum(p*m) + smooth) / (sum(p) + sum(m) + smooth)."""
    p = np.asarray(prob_map, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    check_same_shape(p, m, "dice loss prob/mask")
    num = 2.0 * float((p * m).sum()) + smooth
    den = float(p.sum()) + float(m.sum()) + smooth
    if den == 0.0:
        raise ValidationError("dice loss undefined: empty map and mask with smooth=0")
    return 1.0 - num / den


def dice_loss_grad(prob_map, mask, smooth: float = 1.0) -> np.ndarray:
    """d(dice loss)/d(prob_map), elementwise."""
    p = np.asarray(prob_map, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    check_same_shape(p, m, "dice loss prob/mask")
    num = 2.0 * float((p * m).sum()) + smooth
    den = float(p.sum()) + float(m.sum()) + smooth
    if den == 0.0:
        raise ValidationError("dice loss undefined: empty map and mask with smooth=0")
    return -(2.0 * m * den - num) / (den * den)


def pool_mask_to_grid(mask, grid_h: int, grid_w: int) -> np.ndarray:
    """Max-pool a full-resolution binary mask onto a patch grid.

    Windows partition the mask with integer boundaries; any anomalous pixel
    inside a window marks the whole patch anomalous.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValidationError(f"mask must be 2-dimensional, got shape {m.shape}")
    h, w = m.shape
    if grid_h > h or grid_w > w:
        raise ValidationError(f"grid {grid_h}x{grid_w} exceeds mask {h}x{w}")
    if (grid_h, grid_w) == (h, w):
        return (m != 0).astype(np.uint8)
    if h % grid_h == 0 and w % grid_w == 0:
        ph, pw = h // grid_h, w // grid_w
        windows = (m != 0).reshape(grid_h, ph, grid_w, pw)
        return windows.any(axis=(1, 3)).astype(np.uint8)
    re = (np.arange(grid_h + 1) * h) // grid_h
    ce = (np.arange(grid_w + 1) * w) // grid_w
    out = np.zeros((grid_h, grid_w), dtype=np.uint8)
    for i in range(grid_h):
        for j in range(grid_w):
            out[i, j] = 1 if (m[re[i] : re[i + 1], ce[j] : ce[j + 1]] != 0).any() else 0
    return out
