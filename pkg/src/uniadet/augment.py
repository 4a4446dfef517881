"""Class-aware augmentation: grid mosaic and grid cropping.

Both operations run on rasters before feature extraction and never change
the sample's image-level label; masks of normal outputs stay all-zero.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import ValidationError
from .losses import pool_mask_to_grid
from .scoring import upsample_map
from .types import Raster, TrainSample

logger = logging.getLogger("uniadet")


def resize_image(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an HxWxC array."""
    if data.shape[:2] == (out_h, out_w):
        return data
    return np.stack(
        [upsample_map(data[:, :, c], out_h, out_w) for c in range(data.shape[2])], axis=2
    )


def resize_mask_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with floor mapping (onto for upscaling)."""
    h, w = mask.shape
    if (h, w) == (out_h, out_w):
        return mask.copy()
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return mask[np.ix_(rows, cols)]


def _cell_edges(size: int, n: int) -> np.ndarray:
    return (np.arange(n + 1) * size) // n


def grid_mosaic(candidate: TrainSample, pool, n: int, rng) -> TrainSample:
    """Tile the candidate with n*n - 1 same-class images drawn from the pool.

    A normal candidate only admits normal tiles; an anomalous candidate
    admits a mix. Each tile is the full source image downscaled into its
    cell (bilinear image, max-pooled mask). Returns the candidate unchanged
    when n == 1 or the pool cannot supply any eligible tile.
    """
    if n < 1:
        raise ValidationError(f"mosaic grid must be >= 1, got {n}")
    if n == 1:
        return candidate
    if candidate.image is None:
        logger.warning("grid_mosaic skipped for %r: no raster available", candidate.sample_id)
        return candidate
    eligible = [
        s
        for s in pool
        if s is not candidate
        and s.class_name == candidate.class_name
        and s.image is not None
        and (candidate.label == 1 or s.label == 0)
    ]
    need = n * n - 1
    if not eligible:
        logger.warning(
            "grid_mosaic skipped for %r: no eligible same-class pool images", candidate.sample_id
        )
        return candidate
    replace = len(eligible) < need
    picks = rng.choice(len(eligible), size=need, replace=replace)
    tiles = [eligible[int(i)] for i in picks]
    candidate_cell = int(rng.integers(n * n))
    tiles.insert(candidate_cell, candidate)

    h, w = candidate.image.height, candidate.image.width
    channels = candidate.image.channels
    re = _cell_edges(h, n)
    ce = _cell_edges(w, n)
    out_img = np.empty((h, w, channels))
    out_mask = np.zeros((h, w), dtype=np.uint8)
    for cell, tile in enumerate(tiles):
        i, j = divmod(cell, n)
        if tile.image.channels != channels:
            raise ValidationError(
                f"mosaic tile {tile.sample_id!r} has {tile.image.channels} channels, expected {channels}"
            )
        src_img = tile.image.data
        src_mask = tile.mask_or_zeros(tile.image.height, tile.image.width)
        if (tile.image.height, tile.image.width) != (h, w):
            src_img = resize_image(src_img, h, w)
            src_mask = resize_mask_nearest(src_mask, h, w)
        ch, cw = re[i + 1] - re[i], ce[j + 1] - ce[j]
        out_img[re[i] : re[i + 1], ce[j] : ce[j + 1]] = resize_image(src_img, ch, cw)
        out_mask[re[i] : re[i + 1], ce[j] : ce[j + 1]] = pool_mask_to_grid(src_mask, ch, cw)
    return TrainSample(
        label=candidate.label,
        class_name=candidate.class_name,
        image=Raster(data=out_img),
        mask=out_mask if candidate.label == 1 else None,
        sample_id=f"{candidate.sample_id}#mosaic{n}",
    )


def grid_crop(candidate: TrainSample, n: int, rng) -> TrainSample:
    """Crop one cell of an n*n partition and upscale it back to full size.

    Normal samples pick a cell uniformly; anomalous samples pick uniformly
    among cells containing anomalous pixels, so the label (and a non-empty
    mask) is preserved.
    """
    if n < 1:
        raise ValidationError(f"crop grid must be >= 1, got {n}")
    if n == 1:
        return candidate
    if candidate.image is None:
        logger.warning("grid_crop skipped for %r: no raster available", candidate.sample_id)
        return candidate
    h, w = candidate.image.height, candidate.image.width
    if n > min(h, w):
        raise ValidationError(f"crop grid {n} exceeds image size {h}x{w}")
    mask = candidate.mask_or_zeros(h, w)
    re = _cell_edges(h, n)
    ce = _cell_edges(w, n)
    if candidate.label == 1:
        if not mask.any():
            raise ValidationError(
                f"grid_crop contract violation: anomalous sample {candidate.sample_id!r} has an empty mask"
            )
        cells = [
            (i, j)
            for i in range(n)
            for j in range(n)
            if mask[re[i] : re[i + 1], ce[j] : ce[j + 1]].any()
        ]
    else:
        cells = [(i, j) for i in range(n) for j in range(n)]
    i, j = cells[int(rng.integers(len(cells)))]
    crop_img = candidate.image.data[re[i] : re[i + 1], ce[j] : ce[j + 1]]
    crop_mask = mask[re[i] : re[i + 1], ce[j] : ce[j + 1]]
    out_img = resize_image(crop_img, h, w)
    out_mask = resize_mask_nearest(crop_mask, h, w)
    return TrainSample(
        label=candidate.label,
        class_name=candidate.class_name,
        image=Raster(data=out_img),
        mask=out_mask if candidate.label == 1 else None,
        sample_id=f"{candidate.sample_id}#crop{n}",
    )


def maybe_augment(sample: TrainSample, pool, cfg, rng) -> TrainSample:
    """Apply one class-aware augmentation with probability cfg.caa_probability.

    The operation (mosaic or crop) is a fair coin and the grid size is drawn
    uniformly from cfg.caa_grids.
    """
    if rng.random() >= cfg.caa_probability:
        return sample
    n = int(cfg.caa_grids[int(rng.integers(len(cfg.caa_grids)))])
    if rng.random() < 0.5:
        return grid_mosaic(sample, pool, n, rng)
    return grid_crop(sample, n, rng)
