"""Training-free few-shot path: per-layer normal-patch memory banks.

Nearest-neighbor search is exact. The similarity kernel is an elementwise
multiply followed by a last-axis sum (not a BLAS matmul) because that
reduction is bitwise-reproducible by a per-pair exhaustive search; BLAS
gemm kernels round differently and would break exactness guarantees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scoring import upsample_map, zero_shot_parts
from .types import AnomalyPrediction, FeatureStack, LayerFeatures, WeightBank
from .validation import unit_rows

# distances in [0, 2] are divided by this before fusing with probabilities
DISTANCE_NORMALIZER = 2.0

_CHUNK_ELEMENTS = 4_000_000  # cap on cells x bank x dim temporaries


@dataclass(frozen=True, eq=False)
class MemoryBank:
    """Per-layer stores of unit-normalized normal patch tokens."""

    per_layer: tuple[np.ndarray, ...]
    shots: int
    source_ids: tuple[str, ...]
    block_indices: tuple[int, ...]

    def __post_init__(self):
        stores = []
        for i, store in enumerate(self.per_layer):
            arr = np.asarray(store, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise ValidationError(f"bank layer {i}: store must be a non-empty 2-d matrix")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"bank layer {i}: non-finite tokens")
            arr.setflags(write=False)
            stores.append(arr)
        if self.shots < 1:
            raise ValidationError("memory bank needs at least one reference image")
        if len(self.block_indices) != len(stores):
            raise ValidationError("block_indices length must match per_layer")
        object.__setattr__(self, "per_layer", tuple(stores))
        object.__setattr__(self, "source_ids", tuple(self.source_ids))
        object.__setattr__(self, "block_indices", tuple(int(b) for b in self.block_indices))


def build_bank(references, shots: int | None = None) -> MemoryBank:
    """Flatten and unit-normalize all patch tokens of K reference stacks.

    Ordering is deterministic: reference order, then row-major over the grid.
    """
    refs = list(references)
    if not refs:
        raise ValidationError("build_bank requires at least one reference stack")
    if shots is not None and shots != len(refs):
        raise ValidationError(f"shots={shots} but {len(refs)} reference stacks given")
    first = refs[0]
    for other in refs[1:]:
        if other.block_indices != first.block_indices:
            raise ValidationError(
                f"reference {other.source_id!r}: block indices {other.block_indices} "
                f"differ from {first.block_indices}"
            )
        for a, b in zip(first.layers, other.layers):
            if (a.dim, a.grid_h, a.grid_w) != (b.dim, b.grid_h, b.grid_w):
                raise ValidationError(
                    f"reference {other.source_id!r}: layer {b.block_index} shape differs"
                )
    stores = []
    for li in range(len(first.layers)):
        tokens = np.concatenate(
            [r.layers[li].patch_tokens.reshape(-1, r.layers[li].dim).astype(np.float64) for r in refs]
        )
        stores.append(unit_rows(tokens, name=f"bank layer {li} tokens"))
    return MemoryBank(
        per_layer=tuple(stores),
        shots=len(refs),
        source_ids=tuple(r.source_id for r in refs),
        block_indices=first.block_indices,
    )


def query_layer(query: LayerFeatures, bank_layer: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbor cosine distance per spatial location, in [0, 2]."""
    store = np.asarray(bank_layer, dtype=np.float64)
    if store.ndim != 2 or store.shape[0] == 0:
        raise ValidationError("bank layer store must be a non-empty 2-d matrix")
    if store.shape[1] != query.dim:
        raise ValidationError(
            f"bank token dim {store.shape[1]} != query dim {query.dim}"
        )
    q = unit_rows(query.patch_tokens.reshape(-1, query.dim).astype(np.float64), name="query tokens")
    n = q.shape[0]
    out = np.empty(n, dtype=np.float64)
    chunk = max(1, _CHUNK_ELEMENTS // (store.shape[0] * store.shape[1]))
    for start in range(0, n, chunk):
        block = q[start : start + chunk]
        sims = (block[:, None, :] * store[None, :, :]).sum(axis=2)
        out[start : start + chunk] = (1.0 - sims).min(axis=1)
    return out.reshape(query.grid_h, query.grid_w)


def check_bank_matches_stack(bank: MemoryBank, stack: FeatureStack) -> None:
    if bank.block_indices != stack.block_indices:
        raise ValidationError(
            f"bank blocks {bank.block_indices} != stack blocks {stack.block_indices}"
        )
    for store, lf in zip(bank.per_layer, stack.layers):
        if store.shape[1] != lf.dim:
            raise ValidationError(
                f"block {lf.block_index}: bank dim {store.shape[1]} != feature dim {lf.dim}"
            )


def few_shot_map(features: FeatureStack, bank: MemoryBank) -> np.ndarray:
    """Multi-scale average of per-layer nearest-neighbor distance grids, in [0, 2]."""
    check_bank_matches_stack(bank, features)
    grids = [query_layer(lf, store) for lf, store in zip(features.layers, bank.per_layer)]
    target_h = max(g.shape[0] for g in grids)
    target_w = max(g.shape[1] for g in grids)
    resampled = [
        g if g.shape == (target_h, target_w) else upsample_map(g, target_h, target_w)
        for g in grids
    ]
    return np.mean(resampled, axis=0)


def predict_few_shot(
    features: FeatureStack,
    weights: WeightBank,
    bank: MemoryBank,
    *,
    keep_layer_maps: bool = False,
) -> AnomalyPrediction:
    """Fused few-shot prediction for one image.

    The distance map (rescaled into [0,1]) is mixed with the zero-shot map by
    lambda_f; the image score fuses the zero-shot score with the fused map's
    maximum by lambda_p. With lambda_f = 0 this reproduces the zero-shot
    prediction exactly.
    """
    layer_maps, _, zero_grid, mean_cls_score = zero_shot_parts(features, weights)
    distance_grid = few_shot_map(features, bank) / DISTANCE_NORMALIZER
    if distance_grid.shape != zero_grid.shape:
        distance_grid = upsample_map(distance_grid, zero_grid.shape[0], zero_grid.shape[1])
    lam_f = weights.lambda_f
    fused = (1.0 - lam_f) * zero_grid + lam_f * distance_grid
    full_map = upsample_map(fused, features.image_height, features.image_width)
    full_map = np.clip(full_map, 0.0, 1.0)
    lam_p = weights.lambda_p
    score = (1.0 - lam_p) * mean_cls_score + lam_p * float(full_map.max())
    score = float(np.clip(score, 0.0, 1.0))
    return AnomalyPrediction(
        map=full_map,
        score=score,
        per_layer_maps=tuple(layer_maps) if keep_layer_maps else None,
    )
