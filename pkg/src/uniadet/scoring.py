"""Zero-shot scoring: cosine heads, temperature softmax, layer maps, fusion.

Every function here is pure and deterministic; weight banks and feature
stacks are immutable, so batch scoring can run concurrently without locks.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .types import ANOMALY_COLUMN, NORMAL_COLUMN, AnomalyPrediction, FeatureStack, LayerFeatures, LayerWeights, WeightBank
from .validation import check_weight_matrix, unit_rows


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two equal-length non-zero vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValidationError("cosine_similarity expects 1-d vectors")
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.sqrt(np.sum(a * a))
    nb = np.sqrt(np.sum(b * b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity undefined for zero-norm vectors")
    return float(np.dot(a, b) / (na * nb))


def two_class_softmax(sim_normal, sim_anomaly, tau: float):
    """Anomaly-class probability of a two-way softmax over similarities / tau.

    Accepts scalars or broadcastable arrays. Computed stably by subtracting
    the per-element max before exponentiation; tau = 0.07 amplifies logits by
    roughly 14x, so the naive form would overflow float32 ranges.
    """
    if not tau > 0:
        raise ValidationError(f"temperature tau must be positive, got {tau!r}")
    zn = np.asarray(sim_normal, dtype=np.float64) / tau
    za = np.asarray(sim_anomaly, dtype=np.float64) / tau
    m = np.maximum(zn, za)
    en = np.exp(zn - m)
    ea = np.exp(za - m)
    out = ea / (en + ea)
    if out.ndim == 0:
        return float(out)
    return out


def _cosine_to_columns(tokens: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Cosine similarity of each token (last axis) against both weight columns."""
    w = check_weight_matrix(weights, "weights")
    if tokens.shape[-1] != w.shape[0]:
        raise ValidationError(f"token dim {tokens.shape[-1]} != weight dim {w.shape[0]}")
    t_hat = unit_rows(tokens)
    w_hat = w / np.sqrt((w * w).sum(axis=0, keepdims=True))
    return t_hat @ w_hat


def score_layer(features: LayerFeatures, weights: LayerWeights, tau: float):
    """Score one layer with its own decoupled heads.

    Returns (layer_map, layer_score): the [grid_h, grid_w] anomaly-probability
    map from the segmentation head over patch tokens, and the scalar anomaly
    probability from the classification head over the global token.
    """
    if features.dim != weights.dim:
        raise ValidationError(
            f"layer {features.block_index}: feature dim {features.dim} != weight dim {weights.dim}"
        )
    seg_sims = _cosine_to_columns(features.patch_tokens.astype(np.float64), weights.w_seg)
    layer_map = two_class_softmax(seg_sims[..., NORMAL_COLUMN], seg_sims[..., ANOMALY_COLUMN], tau)
    cls_sims = _cosine_to_columns(features.global_token.astype(np.float64), weights.w_cls)
    layer_score = two_class_softmax(cls_sims[NORMAL_COLUMN], cls_sims[ANOMALY_COLUMN], tau)
    return layer_map, float(layer_score)


def score_layer_shared(features: LayerFeatures, shared_w, tau: float):
    """Baseline scoring with a single weight matrix serving both heads."""
    w = check_weight_matrix(shared_w, "shared_w")
    return score_layer(features, LayerWeights(w_cls=w, w_seg=w), tau)


def upsample_map(grid_map, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear, corner-aligned resampling of a 2-d map to out_h x out_w.

    Output values are convex combinations of the input, so they never leave
    the input's [min, max] range. No smoothing is applied.
    """
    g = np.asarray(grid_map, dtype=np.float64)
    if g.ndim != 2:
        raise ValidationError(f"grid map must be 2-dimensional, got shape {g.shape}")
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = g.shape
    if (h, w) == (out_h, out_w):
        return g.copy()
    rows = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = g[np.ix_(r0, c0)] * (1.0 - fc) + g[np.ix_(r0, c1)] * fc
    bot = g[np.ix_(r1, c0)] * (1.0 - fc) + g[np.ix_(r1, c1)] * fc
    return top * (1.0 - fr) + bot * fr


def aggregate_layers(layer_maps, layer_scores):
    """Average per-layer grids (resampled to the finest grid) and scores.

    The common grid is the elementwise max of the grid dims present; scores
    are combined by an unweighted arithmetic mean.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in layer_maps]
    scores = [float(s) for s in layer_scores]
    if not maps or not scores:
        raise ValidationError("aggregate_layers requires at least one layer")
    if len(maps) != len(scores):
        raise ValidationError(f"{len(maps)} maps but {len(scores)} scores")
    target_h = max(m.shape[0] for m in maps)
    target_w = max(m.shape[1] for m in maps)
    resampled = [
        m if m.shape == (target_h, target_w) else upsample_map(m, target_h, target_w)
        for m in maps
    ]
    map_out = np.mean(resampled, axis=0)
    return map_out, float(np.mean(scores))


def check_stack_matches_bank(stack: FeatureStack, bank: WeightBank) -> None:
    """Raise unless the stack's layers align one-to-one with the bank's."""
    if len(stack.layers) != bank.num_layers:
        raise ValidationError(
            f"stack has {len(stack.layers)} layers but weight bank has {bank.num_layers}"
        )
    for lf, lw, block in zip(stack.layers, bank.per_layer, bank.block_indices):
        if lf.block_index != block:
            raise ValidationError(
                f"layer block mismatch: stack {lf.block_index} vs bank {block}"
            )
        if lf.dim != lw.dim:
            raise ValidationError(
                f"block {block}: feature dim {lf.dim} != weight dim {lw.dim}"
            )


def zero_shot_parts(features: FeatureStack, weights: WeightBank):
    """Per-layer maps/scores plus their aggregate, before upsampling/fusion."""
    check_stack_matches_bank(features, weights)
    layer_maps = []
    layer_scores = []
    for lf, lw in zip(features.layers, weights.per_layer):
        m, s = score_layer(lf, lw, weights.tau)
        layer_maps.append(m)
        layer_scores.append(s)
    grid_map, mean_score = aggregate_layers(layer_maps, layer_scores)
    return layer_maps, layer_scores, grid_map, mean_score


def predict_zero_shot(
    features: FeatureStack, weights: WeightBank, *, keep_layer_maps: bool = False
) -> AnomalyPrediction:
    """Full zero-shot prediction for one image.

    The anomaly map is the cross-layer average upsampled to image resolution;
    the image score fuses the mean per-layer classification probability with
    the map's maximum using weight lambda_p.
    """
    layer_maps, _, grid_map, mean_score = zero_shot_parts(features, weights)
    full_map = upsample_map(grid_map, features.image_height, features.image_width)
    full_map = np.clip(full_map, 0.0, 1.0)
    lam = weights.lambda_p
    score = (1.0 - lam) * mean_score + lam * float(full_map.max())
    score = float(np.clip(score, 0.0, 1.0))
    return AnomalyPrediction(
        map=full_map,
        score=score,
        per_layer_maps=tuple(layer_maps) if keep_layer_maps else None,
    )
