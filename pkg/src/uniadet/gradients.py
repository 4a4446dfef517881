"""Closed-form gradients of the training losses with respect to the weight
pairs, chained through cosine normalization and the temperature softmax.

Feature tokens are frozen; no gradient ever flows into them. For the
two-class softmax p = sigma((s_a - s_n) / tau):

    dL/ds_a = q * p * (1 - p) / tau,   dL/ds_n = -dL/ds_a

with q = dL/dp, and for cross-entropy the product collapses to
(p - y) / tau exactly. For a cosine similarity s = <t_hat, w / |w|>,

    ds/dw = (t_hat - s * w_hat) / |w|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .losses import (
    cross_entropy_loss,
    dice_loss,
    dice_loss_grad,
    focal_loss,
    focal_loss_grad,
    pool_mask_to_grid,
)
from .scoring import check_stack_matches_bank, two_class_softmax
from .types import FeatureStack, WeightBank
from .validation import unit_rows


@dataclass(eq=False)
class FeaturizedSample:
    """A training item resolved to features: stack, full-resolution mask, label."""

    features: FeatureStack
    mask: np.ndarray | None
    label: int
    sample_id: str = ""


@dataclass(eq=False)
class LayerGradients:
    w_cls: np.ndarray
    w_seg: np.ndarray


@dataclass(eq=False)
class GradientResult:
    """Batch-mean gradients mirroring the WeightBank layout, plus loss values."""

    per_layer: list[LayerGradients]
    loss_total: float
    loss_ce: float
    loss_focal: float
    loss_dice: float


def _normalize_columns(w: np.ndarray):
    norms = np.sqrt((w * w).sum(axis=0))
    return w / norms, norms


def _cosine_grad(coeffs, tokens_hat, sims, w_hat, w_norm):
    """Sum over tokens of coeff * d(cosine)/d(weight column)."""
    return (tokens_hat.T @ coeffs - float(coeffs @ sims) * w_hat) / w_norm


def compute_gradients(batch, weights: WeightBank, cfg) -> GradientResult:
    """Analytic d(batch loss)/d(weights) for a featurized batch.

    The batch loss is the mean over samples of the per-sample loss; the
    per-sample loss combines, over layers, weighted cross-entropy on the
    classification head plus weighted focal and Dice on the segmentation
    head. Layer reduction follows cfg.layer_loss_reduction ("sum" or "mean").
    """
    batch = list(batch)
    if not batch:
        raise ValueError("compute_gradients requires a non-empty batch")
    for fs in batch:
        check_stack_matches_bank(fs.features, weights)
    tau = cfg.tau
    n_layers = weights.num_layers
    layer_scale = 1.0 if cfg.layer_loss_reduction == "sum" else 1.0 / n_layers
    grads = [
        LayerGradients(
            w_cls=np.zeros((lw.dim, 2)), w_seg=np.zeros((lw.dim, 2))
        )
        for lw in weights.per_layer
    ]
    total_ce = total_focal = total_dice = 0.0
    inv_b = 1.0 / len(batch)
    for fs in batch:
        stack = fs.features
        for li, (lf, lw) in enumerate(zip(stack.layers, weights.per_layer)):
            wc = lw.w_cls.astype(np.float64)
            ws = lw.w_seg.astype(np.float64)
            wc_hat, wc_norm = _normalize_columns(wc)
            ws_hat, ws_norm = _normalize_columns(ws)

            # classification head on the global token
            x_hat = unit_rows(lf.global_token.astype(np.float64))
            s_cls = x_hat @ wc_hat
            p_img = two_class_softmax(s_cls[0], s_cls[1], tau)
            ce = cross_entropy_loss(p_img, fs.label)
            total_ce += ce * layer_scale * inv_b
            # dL/ds_a for softmax + CE collapses to (p - y) / tau
            ds_a = cfg.loss_weight_ce * (p_img - fs.label) / tau * layer_scale * inv_b
            x_row = x_hat[None, :]
            grads[li].w_cls[:, 1] += _cosine_grad(
                np.array([ds_a]), x_row, s_cls[1:2], wc_hat[:, 1], wc_norm[1]
            )
            grads[li].w_cls[:, 0] += _cosine_grad(
                np.array([-ds_a]), x_row, s_cls[0:1], wc_hat[:, 0], wc_norm[0]
            )

            # segmentation head on the patch tokens
            t_hat = unit_rows(lf.patch_tokens.reshape(-1, lf.dim).astype(np.float64))
            sims = t_hat @ ws_hat
            p_map = two_class_softmax(sims[:, 0], sims[:, 1], tau)
            if fs.mask is not None:
                grid_mask = pool_mask_to_grid(fs.mask, lf.grid_h, lf.grid_w).reshape(-1)
            else:
                grid_mask = np.zeros(lf.grid_h * lf.grid_w, dtype=np.uint8)
            fl = focal_loss(p_map, grid_mask, cfg.focal_gamma, cfg.focal_alpha)
            dl = dice_loss(p_map, grid_mask, cfg.dice_smooth)
            total_focal += fl * layer_scale * inv_b
            total_dice += dl * layer_scale * inv_b
            q = cfg.loss_weight_focal * focal_loss_grad(
                p_map, grid_mask, cfg.focal_gamma, cfg.focal_alpha
            )
            q = q + cfg.loss_weight_dice * dice_loss_grad(p_map, grid_mask, cfg.dice_smooth)
            ds_a_map = q * p_map * (1.0 - p_map) / tau * layer_scale * inv_b
            grads[li].w_seg[:, 1] += _cosine_grad(ds_a_map, t_hat, sims[:, 1], ws_hat[:, 1], ws_norm[1])
            grads[li].w_seg[:, 0] += _cosine_grad(-ds_a_map, t_hat, sims[:, 0], ws_hat[:, 0], ws_norm[0])

    loss_total = (
        cfg.loss_weight_ce * total_ce
        + cfg.loss_weight_focal * total_focal
        + cfg.loss_weight_dice * total_dice
    )
    if not np.isfinite(loss_total):
        bad = [fs.sample_id for fs in batch]
        raise NumericError(f"non-finite training loss on batch containing {bad}")
    return GradientResult(
        per_layer=grads,
        loss_total=float(loss_total),
        loss_ce=float(total_ce),
        loss_focal=float(total_focal),
        loss_dice=float(total_dice),
    )
