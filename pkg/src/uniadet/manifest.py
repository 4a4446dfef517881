"""Dataset manifests: the JSON corpus index shared by training and evaluation.

Schema:
    {"root": str, "entries": [{"id": str, "class_name": str,
      "split": "train"|"test", "label": 0|1,
      "image_path"?: str, "feature_path"?: str, "mask_path"?: str}]}

Relative entry paths resolve against `root`; a relative `root` resolves
against the manifest file's directory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

logger = logging.getLogger("uniadet")

SPLITS = ("train", "test")


@dataclass(eq=False)
class ManifestEntry:
    id: str
    class_name: str
    split: str
    label: int
    image_path: str | None = None
    feature_path: str | None = None
    mask_path: str | None = None

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "class_name": self.class_name,
            "split": self.split,
            "label": self.label,
        }
        for key in ("image_path", "feature_path", "mask_path"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@dataclass(eq=False)
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def classes(self) -> list[str]:
        return sorted({e.class_name for e in self.entries})

    def by_class(self, split: str) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.split(split):
            out.setdefault(e.class_name, []).append(e)
        return out

    def validate_for_pixel_eval(self) -> None:
        """Anomalous test entries must carry a mask when pixel metrics run."""
        missing = [e.id for e in self.split("test") if e.label == 1 and not e.mask_path]
        if missing:
            raise ValidationError(
                f"pixel evaluation requested but anomalous test entries lack mask_path: {missing}"
            )

    def to_json(self) -> dict:
        return {"root": str(self.root), "entries": [e.to_json() for e in self.entries]}


def _validate_entries(entries: list[ManifestEntry]) -> None:
    seen: dict[str, int] = {}
    duplicates = []
    for e in entries:
        seen[e.id] = seen.get(e.id, 0) + 1
        if seen[e.id] == 2:
            duplicates.append(e.id)
    problems = []
    if duplicates:
        problems.append(f"duplicate ids: {duplicates}")
    bad_split = [e.id for e in entries if e.split not in SPLITS]
    if bad_split:
        problems.append(f"unknown split (expected train|test): {bad_split}")
    bad_label = [e.id for e in entries if e.label not in (0, 1)]
    if bad_label:
        problems.append(f"label must be 0 or 1: {bad_label}")
    pathless = [e.id for e in entries if not e.image_path and not e.feature_path]
    if pathless:
        problems.append(f"entries need image_path or feature_path: {pathless}")
    maskless = [e.id for e in entries if e.label == 1 and e.split == "train" and not e.mask_path]
    if maskless:
        problems.append(f"anomalous training entries require mask_path: {maskless}")
    if problems:
        raise ValidationError("invalid manifest: " + "; ".join(problems))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"manifest {path}: not valid JSON: {exc}")
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ValidationError(f"manifest {path}: expected an object with an 'entries' list")
    root = Path(doc.get("root", "."))
    if not root.is_absolute():
        root = path.parent / root
    raw_entries = doc["entries"]
    if not isinstance(raw_entries, list):
        raise ValidationError(f"manifest {path}: 'entries' must be a list")
    entries = []
    for i, raw in enumerate(raw_entries):
        if not isinstance(raw, dict):
            raise ValidationError(f"manifest {path}: entry {i} is not an object")
        try:
            entries.append(
                ManifestEntry(
                    id=str(raw["id"]),
                    class_name=str(raw["class_name"]),
                    split=str(raw["split"]),
                    label=int(raw["label"]),
                    image_path=raw.get("image_path"),
                    feature_path=raw.get("feature_path"),
                    mask_path=raw.get("mask_path"),
                )
            )
        except KeyError as exc:
            raise ValidationError(f"manifest {path}: entry {i} missing field {exc}")
    _validate_entries(entries)
    return DatasetManifest(root=root, entries=entries)


def save_manifest(manifest: DatasetManifest, path, *, root: str | None = None) -> None:
    doc = manifest.to_json()
    if root is not None:
        doc["root"] = root
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def check_mask_consistency(entry: ManifestEntry, mask, *, strict: bool = False) -> None:
    """Flag label/mask disagreement; error in strict mode, warning otherwise."""
    has_anomaly = bool((mask != 0).any())
    if entry.label == 1 and not has_anomaly:
        msg = f"entry {entry.id!r}: label 1 but mask is all-zero"
    elif entry.label == 0 and has_anomaly:
        msg = f"entry {entry.id!r}: label 0 but mask marks anomalous pixels"
    else:
        return
    if strict:
        raise ValidationError(msg)
    logger.warning(msg)
