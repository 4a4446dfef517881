"""Feature providers: the frozen-extractor boundary.

A provider turns rasters into FeatureStacks for a declared layer set and is
strictly deterministic. Real foundation-model features arrive precomputed as
UFST files (FileFeatureProvider); the synthetic provider is a desk-scale
stand-in whose feature geometry mirrors what makes the real problem hard:
distinct manifolds per layer, and global statistics living on a different
(optionally rotated) manifold than patch statistics.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .formats import read_feature_file, read_raster
from .manifest import DatasetManifest, ManifestEntry
from .types import FeatureStack, LayerFeatures, Raster

PHI_DIM = 7  # per-window statistics: 3 channel means, 3 channel stds, texture energy

# texture axis: the coordinates that light up inside defective regions
_ANOMALY_AXIS = np.array([0, 0, 0, 1, 1, 1, 1], dtype=np.float64) / 2.0
# rotation partner for manifold conflict: the color-mean coordinates
_ROTATION_PARTNER = np.array([1, 1, 1, 0, 0, 0, 0], dtype=np.float64) / np.sqrt(3.0)


class FeatureProvider(ABC):
    """Deterministic raster -> FeatureStack mapping for a fixed layer set."""

    @property
    @abstractmethod
    def layer_spec(self) -> tuple[tuple[int, int, int, int], ...]:
        """Declared layers as (block_index, dim, grid_h, grid_w) tuples."""

    @abstractmethod
    def extract(self, raster: Raster, source_id: str = "") -> FeatureStack:
        ...

    @property
    def block_indices(self) -> tuple[int, ...]:
        return tuple(spec[0] for spec in self.layer_spec)


def _window_edges(size: int, parts: int) -> np.ndarray:
    return (np.arange(parts + 1) * size) // parts


def window_stats(image: np.ndarray, grid_h: int, grid_w: int):
    """Per-window channel means, channel stds, and mean texture energy.

    Windows partition the image with integer boundaries, so any image size
    works with any grid. Returns (means, stds, energy) shaped
    [grid_h, grid_w, C], [grid_h, grid_w, C], [grid_h, grid_w].
    """
    h, w, c = image.shape
    if grid_h > h or grid_w > w:
        raise ValidationError(f"grid {grid_h}x{grid_w} exceeds image {h}x{w}")
    lum = image.mean(axis=2)
    energy = np.zeros((h, w), dtype=np.float64)
    energy[:, 1:] += np.abs(np.diff(lum, axis=1))
    energy[1:, :] += np.abs(np.diff(lum, axis=0))
    if h % grid_h == 0 and w % grid_w == 0:
        ph, pw = h // grid_h, w // grid_w
        win = image.reshape(grid_h, ph, grid_w, pw, c)
        means = win.mean(axis=(1, 3))
        stds = np.sqrt(np.maximum((win**2).mean(axis=(1, 3)) - means**2, 0.0))
        texture = energy.reshape(grid_h, ph, grid_w, pw).mean(axis=(1, 3))
        return means, stds, texture
    re = _window_edges(h, grid_h)
    ce = _window_edges(w, grid_w)
    means = np.empty((grid_h, grid_w, c))
    stds = np.empty((grid_h, grid_w, c))
    texture = np.empty((grid_h, grid_w))
    for i in range(grid_h):
        for j in range(grid_w):
            win = image[re[i] : re[i + 1], ce[j] : ce[j + 1]]
            means[i, j] = win.mean(axis=(0, 1))
            stds[i, j] = win.std(axis=(0, 1))
            texture[i, j] = energy[re[i] : re[i + 1], ce[j] : ce[j + 1]].mean()
    return means, stds, texture


# gain on the texture coordinates: defective windows then dominate their
# tokens' direction, which keeps the two-class boundary well-conditioned
TEXTURE_GAIN = 3.0


def _phi_from_stats(means, stds, texture) -> np.ndarray:
    phi = np.concatenate(
        [
            np.asarray(means),
            TEXTURE_GAIN * np.asarray(stds),
            TEXTURE_GAIN * np.asarray(texture)[..., None],
        ],
        axis=-1,
    )
    phi[..., 0:3] += 1e-3  # keep tokens away from the zero vector
    return phi


def _channels3(data: np.ndarray) -> np.ndarray:
    c = data.shape[2]
    if c >= 3:
        return data[:, :, :3]
    return np.repeat(data, 3, axis=2)[:, :, :3]


def _plane_rotation(angle: float) -> np.ndarray:
    """Rotation by `angle` in the plane spanned by the texture and color axes."""
    u = _ANOMALY_AXIS / np.sqrt((_ANOMALY_AXIS**2).sum())
    v = _ROTATION_PARTNER
    eye = np.eye(PHI_DIM)
    return (
        eye
        + (np.cos(angle) - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + np.sin(angle) * (np.outer(v, u) - np.outer(u, v))
    )


@dataclass(eq=False)
class SyntheticProviderConfig:
    """Config for the toy extractor; serialized to provider.json beside a corpus.

    layer_drift controls how far each layer's basis wanders from a common
    one: 0 makes all layer manifolds identical, large values make them
    unrelated. The default keeps them visibly distinct while still alignable
    by a single shared weight, matching how neighboring transformer blocks
    behave.
    """

    layers: tuple[tuple[int, int, int, int], ...] = (
        (12, 32, 16, 16),
        (18, 32, 16, 16),
        (24, 32, 8, 8),
    )
    seed: int = 0
    conflict_angle: float = 0.0
    layer_drift: float = 0.4

    def to_json(self) -> dict:
        return {
            "type": "synthetic",
            "seed": self.seed,
            "conflict_angle": self.conflict_angle,
            "layer_drift": self.layer_drift,
            "layers": [
                {"block_index": b, "dim": d, "grid_h": gh, "grid_w": gw}
                for b, d, gh, gw in self.layers
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticProviderConfig":
        layers = tuple(
            (int(l["block_index"]), int(l["dim"]), int(l["grid_h"]), int(l["grid_w"]))
            for l in doc["layers"]
        )
        return cls(
            layers=layers,
            seed=int(doc.get("seed", 0)),
            conflict_angle=float(doc.get("conflict_angle", 0.0)),
            layer_drift=float(doc.get("layer_drift", 0.4)),
        )


class SyntheticFeatureProvider(FeatureProvider):
    """Toy extractor: window statistics pushed through fixed seeded projections.

    Each layer owns a random orthonormal basis, so token manifolds differ
    across layers; the global token uses the same basis composed with a
    rotation of the texture/color plane, so global and patch manifolds
    differ too. conflict_angle = pi points the global anomaly response
    opposite to the patch anomaly response, the worst case for a shared
    weight.
    """

    def __init__(self, config: SyntheticProviderConfig | None = None):
        self.config = config or SyntheticProviderConfig()
        for b, d, gh, gw in self.config.layers:
            if d < PHI_DIM:
                raise ValidationError(f"layer dim must be >= {PHI_DIM}, got {d} for block {b}")
            if gh < 1 or gw < 1:
                raise ValidationError(f"bad grid {gh}x{gw} for block {b}")
        rot = _plane_rotation(self.config.conflict_angle)
        base_ss, *layer_seeds = np.random.SeedSequence(self.config.seed).spawn(
            1 + len(self.config.layers)
        )
        dims = {d for _, d, _, _ in self.config.layers}
        base = {
            d: np.random.default_rng(base_ss).standard_normal((d, PHI_DIM)) for d in sorted(dims)
        }
        self._patch_proj = []
        self._global_proj = []
        for (b, d, gh, gw), ss in zip(self.config.layers, layer_seeds):
            drifted = base[d] + self.config.layer_drift * np.random.default_rng(
                ss
            ).standard_normal((d, PHI_DIM))
            basis = np.linalg.qr(drifted)[0]
            self._patch_proj.append(basis)
            self._global_proj.append(basis @ rot)

    @property
    def layer_spec(self):
        return self.config.layers

    def anomaly_direction(self, layer_index: int) -> np.ndarray:
        """Unit token-space direction patch tokens move along inside defects."""
        d = self._patch_proj[layer_index] @ _ANOMALY_AXIS
        return d / np.sqrt((d * d).sum())

    def extract(self, raster: Raster, source_id: str = "") -> FeatureStack:
        data = _channels3(raster.data)
        h, w, _ = data.shape
        stats_cache: dict[tuple[int, int], tuple] = {}

        def stats(gh: int, gw: int):
            key = (gh, gw)
            if key not in stats_cache:
                stats_cache[key] = window_stats(data, gh, gw)
            return stats_cache[key]

        g_means, g_stds, g_texture = stats(min(8, h), min(8, w))
        phi_g = _phi_from_stats(
            g_means.mean(axis=(0, 1)), g_stds.mean(axis=(0, 1)), g_texture.max()
        )
        layers = []
        for (block, dim, grid_h, grid_w), p_proj, g_proj in zip(
            self.config.layers, self._patch_proj, self._global_proj
        ):
            means, stds, texture = stats(grid_h, grid_w)
            phi = _phi_from_stats(means, stds, texture)
            patch_tokens = phi @ p_proj.T
            global_token = g_proj @ phi_g
            layers.append(
                LayerFeatures(
                    block_index=block,
                    global_token=global_token,
                    patch_tokens=patch_tokens,
                )
            )
        return FeatureStack(
            layers=tuple(layers), image_height=h, image_width=w, source_id=source_id
        )


class FileFeatureProvider:
    """Precomputed features: loads UFST files referenced by manifest entries."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest

    def load(self, entry: ManifestEntry) -> FeatureStack:
        if not entry.feature_path:
            raise ValidationError(f"entry {entry.id!r} has no feature_path")
        return read_feature_file(self.manifest.resolve(entry.feature_path), source_id=entry.id)


def featurize_entry(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    provider: FeatureProvider | None,
) -> FeatureStack:
    """Resolve an entry to features: stored UFST first, else extract its image."""
    if entry.feature_path:
        return read_feature_file(manifest.resolve(entry.feature_path), source_id=entry.id)
    if entry.image_path:
        if provider is None:
            raise ValidationError(
                f"entry {entry.id!r} has only an image; a feature provider is required"
            )
        return provider.extract(read_raster(manifest.resolve(entry.image_path)), source_id=entry.id)
    raise ValidationError(f"entry {entry.id!r} has neither feature_path nor image_path")


PROVIDER_FILENAME = "provider.json"


def save_provider_config(config: SyntheticProviderConfig, directory) -> Path:
    path = Path(directory) / PROVIDER_FILENAME
    path.write_text(json.dumps(config.to_json(), indent=2) + "\n", encoding="utf-8")
    return path


def load_provider_near(manifest_path) -> SyntheticFeatureProvider | None:
    """Load provider.json from the manifest's directory, if present."""
    path = Path(manifest_path).parent / PROVIDER_FILENAME
    if not path.exists():
        return None
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("type") != "synthetic":
        raise ValidationError(f"{path}: unknown provider type {doc.get('type')!r}")
    return SyntheticFeatureProvider(SyntheticProviderConfig.from_json(doc))
