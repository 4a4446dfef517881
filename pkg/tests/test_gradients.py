from __future__ import annotations

import numpy as np
import pytest

from uniadet.gradients import FeaturizedSample, compute_gradients
from uniadet.training import TrainConfig
from uniadet.types import FeatureStack, LayerFeatures, LayerWeights, WeightBank

from conftest import random_stack


def make_config(**overrides) -> TrainConfig:
    base = dict(
        epochs=1,
        tau=0.8,
        focal_gamma=2.0,
        focal_alpha=1.0,
        dice_smooth=1.0,
        loss_weight_ce=1.0,
        loss_weight_focal=1.0,
        loss_weight_dice=1.0,
        use_caa=False,
    )
    base.update(overrides)
    return TrainConfig(**base)


def random_instance(rng, n_samples=2, n_layers=2, d=None, grid=None):
    d = d or int(rng.integers(2, 9))
    shapes = tuple(
        (li, d, grid or int(rng.integers(1, 4)), grid or int(rng.integers(1, 4)))
        for li in range(n_layers)
    )
    batch = []
    for si in range(n_samples):
        stack = random_stack(rng, shapes, image_h=12, image_w=12, source_id=f"s{si}")
        label = si % 2
        mask = None
        if label == 1:
            mask = np.zeros((12, 12), dtype=np.uint8)
            mask[rng.integers(0, 12), rng.integers(0, 12)] = 1
        batch.append(FeaturizedSample(features=stack, mask=mask, label=label, sample_id=f"s{si}"))
    bank = WeightBank(
        per_layer=tuple(
            LayerWeights(w_cls=rng.standard_normal((d, 2)), w_seg=rng.standard_normal((d, 2)))
            for _ in range(n_layers)
        ),
        block_indices=tuple(range(n_layers)),
        tau=0.8,
    )
    return batch, bank


def finite_difference(batch, bank, cfg, step=1e-4):
    """Central differences of the batch loss wrt every weight entry."""
    grads = []
    for li, lw in enumerate(bank.per_layer):
        g_cls = np.zeros_like(lw.w_cls, dtype=np.float64)
        g_seg = np.zeros_like(lw.w_seg, dtype=np.float64)
        for which, target in (("w_cls", g_cls), ("w_seg", g_seg)):
            base = getattr(lw, which).astype(np.float64)
            for idx in np.ndindex(base.shape):
                def loss_at(delta):
                    perturbed = base.copy()
                    perturbed[idx] += delta
                    layers = list(bank.per_layer)
                    kwargs = {
                        "w_cls": perturbed if which == "w_cls" else lw.w_cls,
                        "w_seg": perturbed if which == "w_seg" else lw.w_seg,
                    }
                    layers[li] = LayerWeights(**kwargs)
                    nb = WeightBank(
                        per_layer=tuple(layers),
                        block_indices=bank.block_indices,
                        tau=bank.tau,
                    )
                    return compute_gradients(batch, nb, cfg).loss_total

                target[idx] = (loss_at(step) - loss_at(-step)) / (2 * step)
        grads.append((g_cls, g_seg))
    return grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for (ga_c, ga_s), (gn_c, gn_s) in zip(analytic, numeric):
        for a, b in ((ga_c, gn_c), (ga_s, gn_s)):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
            worst = max(worst, float((np.abs(a - b) / denom).max()))
    return worst


class TestGradientOracle:
    def test_matches_finite_differences(self, rng):
        for trial in range(6):
            batch, bank = random_instance(rng)
            cfg = make_config()
            result = compute_gradients(batch, bank, cfg)
            analytic = [(lg.w_cls, lg.w_seg) for lg in result.per_layer]
            numeric = finite_difference(batch, bank, cfg)
            assert max_relative_error(analytic, numeric) <= 1e-3

    def test_each_loss_term_separately(self, rng):
        for weights in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            batch, bank = random_instance(rng, n_layers=1)
            cfg = make_config(
                loss_weight_ce=weights[0],
                loss_weight_focal=weights[1],
                loss_weight_dice=weights[2],
            )
            result = compute_gradients(batch, bank, cfg)
            analytic = [(lg.w_cls, lg.w_seg) for lg in result.per_layer]
            numeric = finite_difference(batch, bank, cfg)
            assert max_relative_error(analytic, numeric) <= 1e-3

    def test_mean_layer_reduction_also_checks(self, rng):
        batch, bank = random_instance(rng, n_layers=3, d=4, grid=2)
        cfg = make_config(layer_loss_reduction="mean")
        result = compute_gradients(batch, bank, cfg)
        analytic = [(lg.w_cls, lg.w_seg) for lg in result.per_layer]
        numeric = finite_difference(batch, bank, cfg)
        assert max_relative_error(analytic, numeric) <= 1e-3


class TestGradientStructure:
    def test_symmetric_weights_give_antisymmetric_cls_gradient(self, rng):
        d = 5
        col = rng.standard_normal((d, 1))
        w = np.hstack([col, col])
        stacks = [random_stack(rng, ((0, d, 2, 2),), source_id=f"s{i}") for i in range(4)]
        batch = []
        for i, stack in enumerate(stacks):
            label = i % 2
            mask = None
            if label:
                mask = np.zeros((16, 16), dtype=np.uint8)
                mask[0, 0] = 1
            batch.append(FeaturizedSample(features=stack, mask=mask, label=label))
        bank = WeightBank(
            per_layer=(LayerWeights(w_cls=w, w_seg=rng.standard_normal((d, 2))),),
            block_indices=(0,),
            tau=0.8,
        )
        cfg = make_config(loss_weight_focal=0.0, loss_weight_dice=0.0)
        result = compute_gradients(batch, bank, cfg)
        g = result.per_layer[0].w_cls
        assert np.allclose(g[:, 0] + g[:, 1], 0.0, atol=1e-12)

    def test_zero_loss_weights_give_zero_gradient(self, rng):
        batch, bank = random_instance(rng)
        cfg = make_config(loss_weight_ce=0.0, loss_weight_focal=0.0, loss_weight_dice=0.0)
        result = compute_gradients(batch, bank, cfg)
        assert result.loss_total == 0.0
        for lg in result.per_layer:
            assert np.allclose(lg.w_cls, 0.0) and np.allclose(lg.w_seg, 0.0)

    def test_loss_components_nonnegative(self, rng):
        batch, bank = random_instance(rng)
        result = compute_gradients(batch, bank, make_config())
        assert result.loss_ce >= 0.0
        assert result.loss_focal >= 0.0
        assert 0.0 <= result.loss_dice  # dice per layer in [0,1]; summed over layers
