"""Domain types: frozen feature stacks, learned weight banks, predictions, samples.

Feature tensors are kept in float32 (the storage dtype); all numerics upcast
to float64 internally. Instances are immutable after construction and safe to
share across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class LayerFeatures:
    """One layer's frozen representation: a global token plus a patch-token grid.

    patch_tokens is [grid_h, grid_w, dim], row-major with the origin at the
    top-left patch.
    """

    block_index: int
    global_token: np.ndarray
    patch_tokens: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.global_token, dtype=np.float32)
        p = np.asarray(self.patch_tokens, dtype=np.float32)
        if self.block_index < 0:
            raise ValidationError(f"block_index must be >= 0, got {self.block_index}")
        if g.ndim != 1 or g.size == 0:
            raise ValidationError(f"global_token must be a non-empty vector, got shape {g.shape}")
        if p.ndim != 3:
            raise ValidationError(f"patch_tokens must be [grid_h, grid_w, dim], got shape {p.shape}")
        if p.shape[2] != g.shape[0]:
            raise ValidationError(
                f"token dim mismatch: global {g.shape[0]} vs patches {p.shape[2]}"
            )
        if p.shape[0] * p.shape[1] < 1:
            raise ValidationError("patch grid must contain at least one cell")
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(p)):
            raise ValidationError(f"layer {self.block_index}: non-finite token values")
        g.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "global_token", g)
        object.__setattr__(self, "patch_tokens", p)

    @property
    def dim(self) -> int:
        return int(self.global_token.shape[0])

    @property
    def grid_h(self) -> int:
        return int(self.patch_tokens.shape[0])

    @property
    def grid_w(self) -> int:
        return int(self.patch_tokens.shape[1])


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """All frozen representations of one image, ordered by ascending block index."""

    layers: tuple[LayerFeatures, ...]
    image_height: int
    image_width: int
    source_id: str = ""

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("FeatureStack requires at least one layer")
        blocks = [lf.block_index for lf in layers]
        if blocks != sorted(blocks) or len(set(blocks)) != len(blocks):
            raise ValidationError(f"layers must have strictly ascending block indices, got {blocks}")
        if self.image_height < 1 or self.image_width < 1:
            raise ValidationError("image dimensions must be positive")
        object.__setattr__(self, "layers", layers)

    @property
    def block_indices(self) -> tuple[int, ...]:
        return tuple(lf.block_index for lf in self.layers)

    def subset(self, blocks) -> "FeatureStack":
        """Restrict to the given block indices (order preserved)."""
        wanted = set(int(b) for b in blocks)
        missing = wanted - set(self.block_indices)
        if missing:
            raise ValidationError(f"stack {self.source_id!r} lacks blocks {sorted(missing)}")
        return FeatureStack(
            layers=tuple(lf for lf in self.layers if lf.block_index in wanted),
            image_height=self.image_height,
            image_width=self.image_width,
            source_id=self.source_id,
        )


NORMAL_COLUMN = 0
ANOMALY_COLUMN = 1


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """A classification and a segmentation weight pair for one layer.

    Both matrices are [dim, 2] with column 0 scoring "normal" and column 1
    scoring "anomaly".
    """

    w_cls: np.ndarray
    w_seg: np.ndarray

    def __post_init__(self):
        from .validation import check_weight_matrix

        wc = check_weight_matrix(self.w_cls, "w_cls")
        ws = check_weight_matrix(self.w_seg, "w_seg")
        if wc.shape != ws.shape:
            raise ValidationError(f"w_cls/w_seg shape mismatch: {wc.shape} vs {ws.shape}")
        wc.setflags(write=False)
        ws.setflags(write=False)
        object.__setattr__(self, "w_cls", wc)
        object.__setattr__(self, "w_seg", ws)

    @property
    def dim(self) -> int:
        return int(self.w_cls.shape[0])


@dataclass(frozen=True, eq=False)
class WeightBank:
    """The learned artifact: per-layer weight pairs plus scoring hyperparameters.

    block_indices records which feature blocks the bank was trained for, in
    the same order as per_layer.
    """

    per_layer: tuple[LayerWeights, ...]
    block_indices: tuple[int, ...]
    tau: float = 0.07
    lambda_p: float = 0.5
    lambda_f: float = 0.5
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        per_layer = tuple(self.per_layer)
        blocks = tuple(int(b) for b in self.block_indices)
        if not per_layer:
            raise ValidationError("WeightBank requires at least one layer")
        if len(blocks) != len(per_layer):
            raise ValidationError(
                f"block_indices length {len(blocks)} != per_layer length {len(per_layer)}"
            )
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau!r}")
        for name in ("lambda_p", "lambda_f"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v!r}")
        object.__setattr__(self, "per_layer", per_layer)
        object.__setattr__(self, "block_indices", blocks)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def num_layers(self) -> int:
        return len(self.per_layer)


@dataclass(frozen=True, eq=False)
class AnomalyPrediction:
    """Per-image output: a full-resolution anomaly map in [0,1] and a scalar score."""

    map: np.ndarray
    score: float
    per_layer_maps: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.float64)
        if m.ndim != 2:
            raise ValidationError(f"anomaly map must be 2-dimensional, got shape {m.shape}")
        if np.any(m < 0.0) or np.any(m > 1.0) or not np.all(np.isfinite(m)):
            raise ValidationError("anomaly map values must lie in [0, 1]")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must lie in [0, 1], got {self.score!r}")
        m.setflags(write=False)
        object.__setattr__(self, "map", m)
        object.__setattr__(self, "score", float(self.score))


@dataclass(frozen=True, eq=False)
class Raster:
    """A row-major [height, width, channels] image with finite float values."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3:
            raise ValidationError(f"raster data must be HxWxC, got shape {d.shape}")
        if d.shape[2] < 1:
            raise ValidationError("raster must have at least one channel")
        if not np.all(np.isfinite(d)):
            raise ValidationError("raster contains non-finite values")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True, eq=False)
class TrainSample:
    """One labeled training item: image and/or precomputed features, plus mask.

    label is 1 iff the mask contains at least one anomalous pixel; normal
    samples carry an all-zero (or absent) mask.
    """

    label: int
    class_name: str
    image: Raster | None = None
    mask: np.ndarray | None = None
    features: FeatureStack | None = None
    sample_id: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r}")
        if self.image is None and self.features is None:
            raise ValidationError(f"sample {self.sample_id!r}: needs an image or features")
        mask = self.mask
        if mask is not None:
            mask = (np.asarray(mask) != 0).astype(np.uint8)
            if mask.ndim != 2:
                raise ValidationError(f"sample {self.sample_id!r}: mask must be 2-dimensional")
            if self.image is not None and mask.shape != (self.image.height, self.image.width):
                raise ValidationError(
                    f"sample {self.sample_id!r}: mask shape {mask.shape} does not match image"
                )
            has_anomaly = bool(mask.any())
            if has_anomaly != (self.label == 1):
                raise ValidationError(
                    f"sample {self.sample_id!r}: label {self.label} inconsistent with mask"
                )
            mask.setflags(write=False)
        elif self.label == 1:
            raise ValidationError(f"sample {self.sample_id!r}: anomalous sample requires a mask")
        object.__setattr__(self, "mask", mask)

    def mask_or_zeros(self, height: int, width: int) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return np.zeros((height, width), dtype=np.uint8)
