"""Command-line tool: synthesize corpora, train weight banks, build memory
banks, predict, evaluate, and run ablation sweeps.

Exit codes: 0 success, 2 validation error, 3 numeric error, 4 IO/format
error. Set UNIADET_LOG=debug|info|warning|error to control logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ValidationError
from .evaluate import evaluate
from .formats import (
    read_bank_file,
    read_feature_file,
    read_mask,
    read_raster,
    read_weight_file,
    write_bank_file,
    write_weight_file,
)
from .manifest import DatasetManifest, load_manifest
from .memory import build_bank, predict_few_shot
from .providers import featurize_entry, load_provider_near
from .scoring import predict_zero_shot
from .synth import SynthConfig, generate_corpus
from .training import TrainConfig, train
from .types import Raster, TrainSample

logger = logging.getLogger("uniadet")


def _parse_layers(text):
    if text is None:
        return None
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ValidationError(f"--layers expects comma-separated block indices, got {text!r}")


def _attach_features_dir(manifest: DatasetManifest, features_dir) -> None:
    """Point entries at <features-dir>/<id>.ufst when present."""
    base = Path(features_dir)
    missing = []
    for entry in manifest.entries:
        path = base / f"{entry.id}.ufst"
        if path.exists():
            entry.feature_path = str(path)
        elif not entry.feature_path and not entry.image_path:
            missing.append(entry.id)
    if missing:
        raise ValidationError(f"--features-dir lacks UFST files for entries: {missing}")


def _provider_for(args, manifest_path, manifest):
    if getattr(args, "features_dir", None):
        _attach_features_dir(manifest, args.features_dir)
        return None
    provider = load_provider_near(manifest_path)
    if provider is not None:
        return provider
    if all(e.feature_path for e in manifest.entries):
        return None
    raise ValidationError(
        "no provider.json found beside the manifest and not all entries carry "
        "feature_path; pass --features-dir or regenerate the corpus"
    )


def _load_train_samples(manifest: DatasetManifest) -> list[TrainSample]:
    samples = []
    for e in manifest.split("train"):
        image = mask = features = None
        if e.image_path:
            image = read_raster(manifest.resolve(e.image_path))
            if e.mask_path:
                mask = read_mask(manifest.resolve(e.mask_path))
        elif e.feature_path:
            features = read_feature_file(manifest.resolve(e.feature_path), source_id=e.id)
            if e.mask_path:
                mask = read_mask(manifest.resolve(e.mask_path))
        samples.append(
            TrainSample(
                label=e.label,
                class_name=e.class_name,
                image=image,
                mask=mask,
                features=features,
                sample_id=e.id,
            )
        )
    return samples


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        tau=args.tau,
        batch_size=args.batch_size,
        seed=args.seed,
        caa_probability=args.caa_probability,
        use_caa=not args.no_caa,
        decouple_cls_seg=not args.no_dcs,
        decouple_layers=not args.no_dhf,
        lambda_p=args.lambda_p,
        lambda_f=args.lambda_f,
        optimizer=args.optimizer,
    )


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--caa-probability", type=float, default=0.5)
    p.add_argument("--no-dcs", action="store_true",
                   help="share one weight matrix between the classification and segmentation heads")
    p.add_argument("--no-dhf", action="store_true",
                   help="share one weight pair across all feature layers")
    p.add_argument("--no-caa", action="store_true", help="disable class-aware augmentation")
    p.add_argument("--lambda-p", type=float, default=0.5)
    p.add_argument("--lambda-f", type=float, default=0.5)
    p.add_argument("--layers", type=str, default=None,
                   help="comma-separated block indices to train on (default: all)")


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        classes=args.classes,
        images_per_class=args.images_per_class,
        anomaly_fraction=args.anomaly_fraction,
        image_height=args.image_size,
        image_width=args.image_size,
        seed=args.seed,
        conflict=args.conflict,
    )
    manifest_path = generate_corpus(args.out, cfg)
    print(f"wrote corpus with {cfg.classes * cfg.images_per_class} images to {manifest_path}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    provider = _provider_for(args, args.manifest, manifest)
    samples = _load_train_samples(manifest)
    cfg = _train_config(args)
    bank = train(samples, provider, cfg, blocks=_parse_layers(args.layers))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_weight_file(bank, out)
    log_path = out.with_suffix(out.suffix + ".log.csv")
    with open(log_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "total", "ce", "focal", "dice"])
        for row in bank.metadata["loss_history"]:
            writer.writerow([row["epoch"], row["total"], row["ce"], row["focal"], row["dice"]])
    print(f"wrote weights to {out} (training log: {log_path})")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    provider = _provider_for(args, args.manifest, manifest)
    weights = read_weight_file(args.weights)
    if args.layers:
        blocks = _parse_layers(args.layers)
        keep = [i for i, b in enumerate(weights.block_indices) if b in set(blocks)]
        from .types import WeightBank

        weights = WeightBank(
            per_layer=tuple(weights.per_layer[i] for i in keep),
            block_indices=tuple(weights.block_indices[i] for i in keep),
            tau=weights.tau,
            lambda_p=weights.lambda_p,
            lambda_f=weights.lambda_f,
            metadata=weights.metadata,
        )
    report = evaluate(
        manifest,
        provider,
        weights,
        shots=args.shots,
        repeat=args.repeat,
        seed=args.seed,
        aupro_fpr=args.aupro_fpr,
        threads=args.threads,
        strict=args.strict,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    out.with_suffix(".csv").write_text(report.to_csv())
    agg = report.aggregate()["mean"]
    summary = "  ".join(
        f"{metric}={cell['mean']:.4f}±{cell['std']:.4f}" for metric, cell in agg.items()
    )
    print(f"mean over classes: {summary}")
    print(f"wrote {out.with_suffix('.json')} and {out.with_suffix('.csv')}")
    return 0


def cmd_bank(args) -> int:
    manifest = load_manifest(args.manifest)
    provider = _provider_for(args, args.manifest, manifest)
    from .evaluate import sample_references

    classes = [args.class_name] if args.class_name else manifest.classes()
    out = Path(args.out)
    if args.class_name and out.suffix == ".ufsb":
        targets = {args.class_name: out}
    else:
        out.mkdir(parents=True, exist_ok=True)
        targets = {cls: out / f"bank_{cls}.ufsb" for cls in classes}
    for ci, cls in enumerate(sorted(classes)):
        rng = np.random.default_rng([args.seed, 0, ci])
        refs = sample_references(manifest, cls, args.shots, rng)
        stacks = [featurize_entry(manifest, e, provider) for e in refs]
        bank = build_bank(stacks)
        write_bank_file(bank, targets[cls])
        print(f"wrote {targets[cls]} ({args.shots} shots: {[e.id for e in refs]})")
    return 0


def cmd_predict(args) -> int:
    weights = read_weight_file(args.weights)
    if args.features:
        stack = read_feature_file(args.features)
    elif args.image:
        manifest_path = args.manifest
        if manifest_path:
            manifest = load_manifest(manifest_path)
            provider = _provider_for(args, manifest_path, manifest)
        else:
            provider = load_provider_near(Path(args.image).parent.parent / "manifest.json")
        if provider is None:
            raise ValidationError("predicting from an image requires a synthetic provider config")
        stack = provider.extract(read_raster(args.image), source_id=Path(args.image).stem)
    else:
        raise ValidationError("predict requires --features or --image")
    stack = stack.subset(weights.block_indices)
    if args.bank:
        memory = read_bank_file(args.bank)
        pred = predict_few_shot(stack, weights, memory)
    else:
        pred = predict_zero_shot(stack, weights)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mask_like_map(out, pred.map)
    payload = {
        "score": pred.score,
        "map_path": str(out),
        "map_max": float(pred.map.max()),
        "shots": None if not args.bank else read_bank_file(args.bank).shots,
        "lambda_p": weights.lambda_p,
        "lambda_f": weights.lambda_f,
        "tau": weights.tau,
    }
    out.with_suffix(".json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"score={pred.score:.6f}  map -> {out}")
    return 0


def write_mask_like_map(path, anomaly_map) -> None:
    """Write an anomaly map as 8-bit PGM, values scaled 0-255."""
    q = np.round(np.clip(anomaly_map, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


ABLATION_LINES = {
    0: {"decouple_cls_seg": False, "decouple_layers": False, "use_caa": False},
    1: {"decouple_cls_seg": True, "decouple_layers": False, "use_caa": False},
    2: {"decouple_cls_seg": True, "decouple_layers": True, "use_caa": False},
    3: {"decouple_cls_seg": True, "decouple_layers": True, "use_caa": True},
}


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.manifest)
    provider = _provider_for(args, args.manifest, manifest)
    samples = _load_train_samples(manifest)
    lines = [int(t) for t in args.lines.split(",") if t.strip()]
    bad = [l for l in lines if l not in ABLATION_LINES]
    if bad:
        raise ValidationError(f"unknown ablation lines {bad}; valid: {sorted(ABLATION_LINES)}")
    rows = []

    def run_one(label, flags, blocks):
        cfg = TrainConfig(
            epochs=args.epochs,
            learning_rate=args.lr,
            tau=args.tau,
            batch_size=args.batch_size,
            seed=args.seed,
            lambda_p=args.lambda_p,
            lambda_f=args.lambda_f,
            **flags,
        )
        bank = train(samples, provider, cfg, blocks=blocks)
        report = evaluate(
            manifest, provider, bank,
            shots=args.shots, repeat=1, seed=args.seed,
            aupro_fpr=args.aupro_fpr, threads=args.threads,
        )
        mean = report.repeats[0].mean_row
        row = {
            "config": label,
            "dcs": int(flags["decouple_cls_seg"]),
            "dhf": int(flags["decouple_layers"]),
            "caa": int(flags["use_caa"]),
            "blocks": "all" if blocks is None else ",".join(str(b) for b in blocks),
            "shots": args.shots,
            "seed": args.seed,
        }
        row.update({k: f"{v:.6f}" for k, v in mean.items()})
        rows.append(row)
        logger.info("ablation %s done: %s", label, mean)

    for line in lines:
        run_one(f"line{line}", ABLATION_LINES[line], None)
    if args.layer_sweep:
        all_blocks = list(provider.block_indices) if provider else None
        if all_blocks is None:
            probe = featurize_entry(manifest, manifest.entries[0], provider)
            all_blocks = list(probe.block_indices)
        full = ABLATION_LINES[2]  # decoupled, no CAA: isolates the layer effect
        for k in range(1, len(all_blocks) + 1):
            blocks = all_blocks[-k:]
            run_one(f"last{k}", full, blocks)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields = ["config", "dcs", "dhf", "caa", "blocks", "shots", "seed"] + [
        m for m in ("I-AUROC", "I-AUPR", "I-F1max", "P-AUROC", "P-AUPR", "P-F1max", "P-AUPRO")
    ]
    with open(out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})
    print(f"wrote {len(rows)} ablation rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uniadet",
        description="Universal anomaly detection over frozen vision features: "
        "decoupled linear heads (zero-shot) plus a normal-patch memory (few-shot).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--images-per-class", type=int, default=40)
    p.add_argument("--anomaly-fraction", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conflict", action="store_true",
                   help="rotate global-token manifolds against patch manifolds")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="learn a weight bank from the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate weights on the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="output path prefix (.json/.csv)")
    p.add_argument("--shots", type=int, default=0)
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=str, default=None)
    p.add_argument("--aupro-fpr", type=float, default=0.3)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--strict", action="store_true", help="label/mask inconsistencies are errors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bank", help="build few-shot memory banks from normal references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--out", required=True, help="output directory (or .ufsb path with --class)")
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class", dest="class_name", default=None)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("predict", help="predict one image or feature file")
    p.add_argument("--features", default=None, help="UFST feature file")
    p.add_argument("--image", default=None, help="PGM/PPM image (requires a provider)")
    p.add_argument("--manifest", default=None, help="manifest whose provider/features to use")
    p.add_argument("--features-dir", default=None)
    p.add_argument("--weights", required=True)
    p.add_argument("--bank", default=None, help="optional UFSB memory bank")
    p.add_argument("--out", required=True, help="output map path (PGM); score JSON beside it")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train+eval over ablation configurations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.add_argument("--lines", default="0,1,2,3",
                   help="comma-separated ablation line numbers (0..3)")
    p.add_argument("--layer-sweep", action="store_true",
                   help="additionally sweep trailing layer subsets")
    p.add_argument("--shots", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lambda-p", type=float, default=0.5)
    p.add_argument("--lambda-f", type=float, default=0.5)
    p.add_argument("--aupro-fpr", type=float, default=0.3)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("UNIADET_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
