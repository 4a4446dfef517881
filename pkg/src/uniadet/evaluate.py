"""Evaluation orchestration: predict a manifest's test split, score it with
the full metric suite, and repeat few-shot runs with fresh reference draws.

Reference sampling is uniform without replacement per class, seeded per
(repeat, class) through SeedSequence spawn keys, so reports are reproducible
and independent of thread count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .formats import read_mask
from .manifest import DatasetManifest, ManifestEntry, check_mask_consistency
from .memory import DISTANCE_NORMALIZER, build_bank, predict_few_shot
from .metrics import ALL_METRICS, MetricsReport, compute_class_metrics
from .providers import FeatureProvider, featurize_entry
from .scoring import predict_zero_shot
from .types import AnomalyPrediction, WeightBank

logger = logging.getLogger("uniadet")


@dataclass(eq=False)
class EvalReport:
    """Aggregated evaluation: per-repeat reports plus mean/std per metric."""

    repeats: list[MetricsReport]
    reference_ids: list[dict[str, list[str]]]
    config: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        """Per-class and mean rows as {metric: {"mean": .., "std": ..}}.

        The spread is the population standard deviation over repeats.
        """
        classes = sorted(self.repeats[0].per_class)
        out: dict[str, dict[str, dict[str, float]]] = {}
        for cls in classes:
            out[cls] = {}
            for metric in ALL_METRICS:
                values = [
                    r.per_class[cls][metric]
                    for r in self.repeats
                    if metric in r.per_class.get(cls, {})
                ]
                if values:
                    out[cls][metric] = {
                        "mean": float(np.mean(values)),
                        "std": float(np.std(values)),
                    }
        mean_rows = [r.mean_row for r in self.repeats]
        out["mean"] = {}
        for metric in ALL_METRICS:
            values = [row[metric] for row in mean_rows if metric in row]
            if values:
                out["mean"][metric] = {
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values)),
                }
        return out

    def to_json(self) -> dict:
        return {
            "aggregate": self.aggregate(),
            "repeats": [r.to_json() for r in self.repeats],
            "reference_ids": self.reference_ids,
            "config": self.config,
        }

    def to_csv(self) -> str:
        import csv as _csv
        import io as _io

        agg = self.aggregate()
        buf = _io.StringIO()
        writer = _csv.writer(buf)
        header = ["category"]
        for metric in ALL_METRICS:
            header += [metric, f"{metric}-std"]
        writer.writerow(header)
        for cls in sorted(agg):
            if cls == "mean":
                continue
            row = [cls]
            for metric in ALL_METRICS:
                cell = agg[cls].get(metric)
                row += ["" if cell is None else f"{cell['mean']:.6f}",
                        "" if cell is None else f"{cell['std']:.6f}"]
            writer.writerow(row)
        row = ["mean"]
        for metric in ALL_METRICS:
            cell = agg["mean"].get(metric)
            row += ["" if cell is None else f"{cell['mean']:.6f}",
                    "" if cell is None else f"{cell['std']:.6f}"]
        writer.writerow(row)
        return buf.getvalue()


def _entry_mask(manifest: DatasetManifest, entry: ManifestEntry, shape, strict: bool):
    if entry.mask_path:
        mask = read_mask(manifest.resolve(entry.mask_path))
        if mask.shape != shape:
            raise ValidationError(
                f"entry {entry.id!r}: mask shape {mask.shape} != image shape {shape}"
            )
        check_mask_consistency(entry, mask, strict=strict)
        return mask
    return np.zeros(shape, dtype=np.uint8)


def predict_entries(
    manifest: DatasetManifest,
    entries,
    provider: FeatureProvider | None,
    weights: WeightBank,
    memory=None,
    threads: int = 1,
) -> list[AnomalyPrediction]:
    """Predict a list of entries, zero-shot or few-shot, preserving order."""

    def one(entry: ManifestEntry) -> AnomalyPrediction:
        stack = featurize_entry(manifest, entry, provider).subset(weights.block_indices)
        if memory is None:
            return predict_zero_shot(stack, weights)
        return predict_few_shot(stack, weights, memory)

    entries = list(entries)
    if threads <= 1 or len(entries) <= 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, entries))


def sample_references(
    manifest: DatasetManifest, class_name: str, shots: int, rng: np.random.Generator
) -> list[ManifestEntry]:
    """Draw K normal train-split entries of one class, without replacement."""
    candidates = [
        e for e in manifest.split("train") if e.class_name == class_name and e.label == 0
    ]
    if len(candidates) < shots:
        raise ValidationError(
            f"class {class_name!r}: {len(candidates)} normal train images available, "
            f"{shots} reference shots requested"
        )
    picks = rng.choice(len(candidates), size=shots, replace=False)
    return [candidates[int(i)] for i in sorted(picks)]


def evaluate(
    manifest: DatasetManifest,
    provider: FeatureProvider | None,
    weights: WeightBank,
    *,
    shots: int = 0,
    repeat: int = 1,
    seed: int = 0,
    aupro_fpr: float = 0.3,
    aupro_bins: int | None = None,
    threads: int = 1,
    strict: bool = False,
) -> EvalReport:
    """Evaluate the test split; shots = 0 is zero-shot, K > 0 samples K normal
    references per class per repeat and fuses the memory path."""
    if repeat < 1:
        raise ValidationError("repeat must be >= 1")
    if shots < 0:
        raise ValidationError("shots must be >= 0")
    by_class = manifest.by_class("test")
    if not by_class:
        raise ValidationError("manifest has an empty test split")
    manifest.validate_for_pixel_eval()

    config = {
        "shots": shots,
        "repeat": repeat,
        "seed": seed,
        "tau": weights.tau,
        "lambda_p": weights.lambda_p,
        "lambda_f": weights.lambda_f,
        "aupro_fpr_limit": aupro_fpr,
        "aupro_bins": aupro_bins,
        "distance_normalizer": DISTANCE_NORMALIZER,
        "blocks": list(weights.block_indices),
        "spread": "population standard deviation over repeats",
    }

    classes = sorted(by_class)
    repeats: list[MetricsReport] = []
    reference_log: list[dict[str, list[str]]] = []

    zero_shot_cache: MetricsReport | None = None
    for rep in range(repeat):
        refs_this_repeat: dict[str, list[str]] = {}
        per_class: dict[str, dict[str, float]] = {}
        counts: dict[str, int] = {}
        if shots == 0 and zero_shot_cache is not None:
            repeats.append(zero_shot_cache)
            reference_log.append({})
            continue
        for ci, cls in enumerate(classes):
            entries = by_class[cls]
            memory = None
            if shots > 0:
                rng = np.random.default_rng([seed, rep, ci])
                ref_entries = sample_references(manifest, cls, shots, rng)
                refs_this_repeat[cls] = [e.id for e in ref_entries]
                stacks = [
                    featurize_entry(manifest, e, provider).subset(weights.block_indices)
                    for e in ref_entries
                ]
                memory = build_bank(stacks)
            preds = predict_entries(manifest, entries, provider, weights, memory, threads)
            labels = [e.label for e in entries]
            scores = [p.score for p in preds]
            masks = [
                _entry_mask(manifest, e, p.map.shape, strict) for e, p in zip(entries, preds)
            ]
            maps = [p.map for p in preds]
            pixel_ok = any(m.any() for m in masks)
            per_class[cls] = compute_class_metrics(
                labels,
                scores,
                masks if pixel_ok else None,
                maps if pixel_ok else None,
                fpr_limit=aupro_fpr,
                aupro_bins=aupro_bins,
            )
            counts[cls] = len(entries)
        report = MetricsReport(per_class=per_class, counts=counts, config=config)
        if shots == 0:
            zero_shot_cache = report
        repeats.append(report)
        reference_log.append(refs_this_repeat)
    return EvalReport(repeats=repeats, reference_ids=reference_log, config=config)
