"""Weight learning: seeded init, Adam/SGD on analytic gradients, class-aware
augmentation, and the ablation switches (shared heads, shared layers, no CAA).

Training is deterministic under a fixed seed: initialization and the data
order/augmentation draws use separate child streams of the master seed, so
toggling ablation flags never perturbs the shuffle sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .augment import maybe_augment
from .errors import ValidationError
from .gradients import FeaturizedSample, compute_gradients
from .providers import FeatureProvider
from .types import FeatureStack, LayerWeights, TrainSample, WeightBank

logger = logging.getLogger("uniadet")


@dataclass(eq=False)
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 0.001
    tau: float = 0.07
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # 4 rather than 16: desk-scale corpora yield too few optimizer steps per
    # epoch at 16 to converge within the default 15 epochs
    batch_size: int = 4
    seed: int = 0
    caa_probability: float = 0.5
    caa_grids: tuple[int, ...] = (2, 3)
    use_caa: bool = True
    decouple_cls_seg: bool = True
    decouple_layers: bool = True
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    dice_smooth: float = 1.0
    loss_weight_ce: float = 1.0
    loss_weight_focal: float = 1.0
    loss_weight_dice: float = 1.0
    layer_loss_reduction: str = "sum"
    lambda_p: float = 0.5
    lambda_f: float = 0.5

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not self.tau > 0:
            raise ValidationError("tau must be positive")
        if not 0.0 <= self.caa_probability <= 1.0:
            raise ValidationError("caa_probability must lie in [0, 1]")
        if any(int(g) < 1 for g in self.caa_grids):
            raise ValidationError("caa grid sizes must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.layer_loss_reduction not in ("sum", "mean"):
            raise ValidationError("layer_loss_reduction must be sum or mean")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


class _Adam:
    def __init__(self, shapes, cfg: TrainConfig):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.cfg = cfg

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


class _Sgd:
    def __init__(self, shapes, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.cfg.learning_rate * g


class _ParamSet:
    """Canonical trainable matrices under the two decoupling switches.

    Always materializes per-layer (w_cls, w_seg) pairs for scoring; gradient
    folding sums tied copies, which is the correct chain rule for shared
    parameters.
    """

    def __init__(self, dims: list[int], cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.n_layers = len(dims)
        if not cfg.decouple_layers and len(set(dims)) > 1:
            raise ValidationError(
                f"shared-layer training requires a uniform feature dim, got {dims}"
            )
        self.heads = ("cls", "seg") if cfg.decouple_cls_seg else ("shared",)
        n_param_layers = self.n_layers if cfg.decouple_layers else 1
        self.params: list[np.ndarray] = []
        for pl in range(n_param_layers):
            d = dims[pl] if cfg.decouple_layers else dims[0]
            for _ in self.heads:
                w = rng.standard_normal((d, 2))
                w /= np.sqrt((w * w).sum(axis=0, keepdims=True))
                self.params.append(w)

    def _index(self, layer: int, head: str) -> int:
        pl = layer if self.cfg.decouple_layers else 0
        return pl * len(self.heads) + self.heads.index(head)

    def layer_weights(self) -> list[LayerWeights]:
        out = []
        for li in range(self.n_layers):
            if self.cfg.decouple_cls_seg:
                wc = self.params[self._index(li, "cls")]
                ws = self.params[self._index(li, "seg")]
            else:
                wc = ws = self.params[self._index(li, "shared")]
            out.append(LayerWeights(w_cls=wc.copy(), w_seg=ws.copy()))
        return out

    def fold_gradients(self, per_layer) -> list[np.ndarray]:
        grads = [np.zeros_like(p) for p in self.params]
        for li, lg in enumerate(per_layer):
            if self.cfg.decouple_cls_seg:
                grads[self._index(li, "cls")] += lg.w_cls
                grads[self._index(li, "seg")] += lg.w_seg
            else:
                grads[self._index(li, "shared")] += lg.w_cls + lg.w_seg
        return grads


def _featurize(
    sample: TrainSample, provider: FeatureProvider | None, blocks
) -> FeatureStack:
    if sample.image is not None and provider is not None:
        stack = provider.extract(sample.image, source_id=sample.sample_id)
    elif sample.features is not None:
        stack = sample.features
    else:
        raise ValidationError(
            f"sample {sample.sample_id!r}: no provider for its raster and no stored features"
        )
    if blocks is not None:
        stack = stack.subset(blocks)
    return stack


def train(
    samples,
    provider: FeatureProvider | None,
    cfg: TrainConfig,
    *,
    blocks=None,
) -> WeightBank:
    """Learn a WeightBank from labeled samples.

    Requires both normal and anomalous samples (anomalous ones carry masks by
    construction). With decouple_cls_seg=False a single matrix per layer
    serves both heads; with decouple_layers=False one weight pair is shared
    across layers. CAA re-extracts features for augmented rasters through the
    provider. Per-epoch loss history lands in the bank's metadata.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("training requires a non-empty sample list")
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise ValidationError(
            "training requires both normal and anomalous samples; "
            f"got labels {sorted(labels)} (losses degenerate otherwise)"
        )
    init_ss, loop_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    probe = _featurize(samples[0], provider, blocks)
    dims = [lf.dim for lf in probe.layers]
    block_indices = probe.block_indices
    params = _ParamSet(dims, cfg, np.random.default_rng(init_ss))
    optimizer = (_Adam if cfg.optimizer == "adam" else _Sgd)(
        [p.shape for p in params.params], cfg
    )
    rng = np.random.default_rng(loop_ss)
    use_caa = cfg.use_caa and cfg.caa_probability > 0.0

    cache: dict[int, FeaturizedSample] = {}

    def featurized(index: int, sample: TrainSample) -> FeaturizedSample:
        if index not in cache:
            cache[index] = FeaturizedSample(
                features=_featurize(sample, provider, blocks),
                mask=sample.mask,
                label=sample.label,
                sample_id=sample.sample_id,
            )
        return cache[index]

    history = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = np.zeros(4)
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            batch = []
            for i in batch_idx:
                sample = samples[int(i)]
                if use_caa:
                    augmented = maybe_augment(sample, samples, cfg, rng)
                    if augmented is not sample:
                        stack = _featurize(augmented, provider, blocks)
                        batch.append(
                            FeaturizedSample(
                                features=stack,
                                mask=augmented.mask,
                                label=augmented.label,
                                sample_id=augmented.sample_id,
                            )
                        )
                        continue
                batch.append(featurized(int(i), sample))
            bank = WeightBank(
                per_layer=tuple(params.layer_weights()),
                block_indices=block_indices,
                tau=cfg.tau,
                lambda_p=cfg.lambda_p,
                lambda_f=cfg.lambda_f,
            )
            result = compute_gradients(batch, bank, cfg)
            optimizer.step(params.params, params.fold_gradients(result.per_layer))
            weight = len(batch) / n
            epoch_losses += weight * np.array(
                [result.loss_total, result.loss_ce, result.loss_focal, result.loss_dice]
            )
        history.append(
            {
                "epoch": epoch,
                "total": float(epoch_losses[0]),
                "ce": float(epoch_losses[1]),
                "focal": float(epoch_losses[2]),
                "dice": float(epoch_losses[3]),
            }
        )
        logger.info("epoch %d: loss %.5f", epoch, epoch_losses[0])

    metadata = {
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "optimizer": cfg.optimizer,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "tau": cfg.tau,
        "caa": {
            "enabled": cfg.use_caa,
            "probability": cfg.caa_probability,
            "grids": list(cfg.caa_grids),
        },
        "ablation": {
            "decouple_cls_seg": cfg.decouple_cls_seg,
            "decouple_layers": cfg.decouple_layers,
            "use_caa": cfg.use_caa,
        },
        "losses": {
            "focal_gamma": cfg.focal_gamma,
            "focal_alpha": cfg.focal_alpha,
            "dice_smooth": cfg.dice_smooth,
            "weights": {
                "ce": cfg.loss_weight_ce,
                "focal": cfg.loss_weight_focal,
                "dice": cfg.loss_weight_dice,
            },
            "layer_reduction": cfg.layer_loss_reduction,
        },
        "blocks": list(block_indices),
        "num_samples": n,
        "loss_history": history,
    }
    return WeightBank(
        per_layer=tuple(params.layer_weights()),
        block_indices=block_indices,
        tau=cfg.tau,
        lambda_p=cfg.lambda_p,
        lambda_f=cfg.lambda_f,
        metadata=metadata,
    )
