"""Desk-scale synthetic corpus generator.

Produces per-class textured images with seeded blob/scratch defects, binary
masks, a manifest, and a provider.json describing the matching synthetic
feature extractor. Defective pixels carry high-contrast speckle, so window
statistics (std, texture energy) separate them from the smooth backgrounds;
that is the signal the anomaly heads are supposed to learn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .formats import write_mask, write_raster
from .manifest import DatasetManifest, ManifestEntry, save_manifest
from .providers import SyntheticProviderConfig, save_provider_config
from .types import Raster


@dataclass(eq=False)
class SynthConfig:
    classes: int = 2
    images_per_class: int = 40
    anomaly_fraction: float = 0.5
    image_height: int = 128
    image_width: int = 128
    seed: int = 0
    train_fraction: float = 0.5
    noise: float = 0.02
    defect_amplitude: float = 0.30
    conflict: bool = False

    def __post_init__(self):
        if self.classes < 1 or self.images_per_class < 1:
            raise ValidationError("classes and images_per_class must be >= 1")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ValidationError("anomaly_fraction must lie in [0, 1]")
        if min(self.image_height, self.image_width) < 16:
            raise ValidationError("images smaller than 16x16 are not supported")


def _ellipse_mask(h, w, cy, cx, ry, rx, angle, out):
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    out |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _segment_mask(h, w, p0, p1, thickness, out):
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.array(p1) - np.array(p0)
    length2 = float(d @ d)
    if length2 == 0.0:
        t = np.zeros((h, w))
    else:
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / length2, 0.0, 1.0)
    px = p0[0] + t * d[0]
    py = p0[1] + t * d[1]
    out |= (xx - px) ** 2 + (yy - py) ** 2 <= thickness**2


def _defect_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        if rng.random() < 0.5:
            ry = rng.uniform(0.04, 0.12) * h
            rx = rng.uniform(0.04, 0.12) * w
            cy = rng.uniform(ry, h - ry)
            cx = rng.uniform(rx, w - rx)
            _ellipse_mask(h, w, cy, cx, max(ry, 1.5), max(rx, 1.5), rng.uniform(0, math.pi), mask)
        else:
            p0 = (rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h)
            p1 = (
                np.clip(p0[0] + rng.uniform(-0.4, 0.4) * w, 0, w - 1),
                np.clip(p0[1] + rng.uniform(-0.4, 0.4) * h, 0, h - 1),
            )
            _segment_mask(h, w, p0, p1, rng.uniform(1.5, 3.5), mask)
    if not mask.any():
        mask[h // 2, w // 2] = True
    return mask


def _render_image(rng, base_color, h, w, noise, mask, defect_amplitude):
    img = np.empty((h, w, 3))
    img[:] = base_color + rng.normal(0.0, 0.01, 3)
    ramp_dir = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (xx / max(w - 1, 1)) * math.cos(ramp_dir) + (yy / max(h - 1, 1)) * math.sin(ramp_dir)
    img += 0.02 * (ramp - ramp.mean())[:, :, None]
    img += rng.normal(0.0, noise, (h, w, 3))
    if mask is not None and mask.any():
        speckle = defect_amplitude * rng.choice([-1.0, 1.0], size=(h, w))
        img[mask] += speckle[mask, None]
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def generate_corpus(out_dir, cfg: SynthConfig) -> Path:
    """Write images, masks, manifest.json, and provider.json; returns manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_height, cfg.image_width
    entries = []
    for ci in range(cfg.classes):
        class_name = f"class{ci:02d}"
        base_color = rng.uniform(0.3, 0.7, 3)
        n = cfg.images_per_class
        n_train = round(n * cfg.train_fraction)
        slots = []
        for split, count in (("train", n_train), ("test", n - n_train)):
            n_anom = round(count * cfg.anomaly_fraction)
            slots += [(split, 1)] * n_anom + [(split, 0)] * (count - n_anom)
        for idx, (split, label) in enumerate(slots):
            sample_id = f"{class_name}_{split}_{idx:03d}"
            mask = _defect_mask(rng, h, w) if label == 1 else None
            img = _render_image(rng, base_color, h, w, cfg.noise, mask, cfg.defect_amplitude)
            image_rel = f"images/{sample_id}.ppm"
            write_raster(out / image_rel, Raster(data=img))
            mask_rel = None
            if label == 1:
                mask_rel = f"masks/{sample_id}.pgm"
                write_mask(out / mask_rel, mask.astype(np.uint8))
            entries.append(
                ManifestEntry(
                    id=sample_id,
                    class_name=class_name,
                    split=split,
                    label=label,
                    image_path=image_rel,
                    mask_path=mask_rel,
                )
            )
    manifest = DatasetManifest(root=out, entries=entries)
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path, root=".")
    save_provider_config(
        SyntheticProviderConfig(
            seed=cfg.seed, conflict_angle=math.pi if cfg.conflict else 0.0
        ),
        out,
    )
    return manifest_path
