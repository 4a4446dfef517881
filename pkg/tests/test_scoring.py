from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uniadet import (
    ValidationError,
    aggregate_layers,
    cosine_similarity,
    predict_zero_shot,
    score_layer,
    score_layer_shared,
    two_class_softmax,
    upsample_map,
)
from uniadet.scoring import zero_shot_parts
from uniadet.types import FeatureStack, LayerFeatures, LayerWeights, WeightBank

from conftest import random_bank, random_layer, random_stack, random_weights


class TestCosineSimilarity:
    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)

    def test_parallel_scale_invariant(self):
        assert cosine_similarity([2, 2], [1, 1]) == pytest.approx(1.0)

    def test_hand_value(self):
        # (3*4 + 4*3) / (5 * 5)
        assert cosine_similarity([3, 4], [4, 3]) == pytest.approx(24 / 25)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValidationError):
            cosine_similarity([0, 0], [1, 1])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            cosine_similarity([1, 2, 3], [1, 2])

    @given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
    @settings(max_examples=50, deadline=None)
    def test_positive_scaling_invariance(self, dim, seed, scale):
        r = np.random.default_rng(seed)
        a, b = r.standard_normal(dim) + 0.1, r.standard_normal(dim) + 0.1
        assert cosine_similarity(a * scale, b) == pytest.approx(cosine_similarity(a, b), abs=1e-9)
        assert -1.0 - 1e-12 <= cosine_similarity(a, b) <= 1.0 + 1e-12


class TestTwoClassSoftmax:
    def test_equal_logits(self):
        for tau in (0.07, 1.0, 10.0):
            assert two_class_softmax(0.3, 0.3, tau) == pytest.approx(0.5)

    def test_closed_form_ln3(self):
        tau = 0.4
        s_n = 0.1
        assert two_class_softmax(s_n, s_n + tau * math.log(3), tau) == pytest.approx(0.75)

    def test_logistic_of_two(self):
        assert two_class_softmax(-1.0, 1.0, 1.0) == pytest.approx(0.880797, abs=1e-6)

    def test_tau_must_be_positive(self):
        with pytest.raises(ValidationError):
            two_class_softmax(0.1, 0.2, 0.0)
        with pytest.raises(ValidationError):
            two_class_softmax(0.1, 0.2, -1.0)

    def test_stable_at_small_tau(self):
        p = two_class_softmax(-1.0, 1.0, 1e-3)
        assert 0.0 < p <= 1.0 and np.isfinite(p)

    def test_monotone_in_tau(self):
        s_n, s_a = 0.1, 0.6
        taus = [0.01, 0.07, 0.5, 2.0, 50.0]
        probs = [two_class_softmax(s_n, s_a, t) for t in taus]
        assert all(a > b for a, b in zip(probs, probs[1:]))
        assert probs[-1] > 0.5  # decays toward 0.5, never below
        assert probs[0] > 0.99  # sharpens toward 1 as tau -> 0+

    def test_array_broadcast(self):
        zn = np.zeros((2, 2))
        za = np.full((2, 2), 0.3)
        out = two_class_softmax(zn, za, 0.3)
        assert out.shape == (2, 2)
        assert np.allclose(out, two_class_softmax(0.0, 0.3, 0.3))

    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 10.0))
    @settings(max_examples=100, deadline=None)
    def test_column_swap_complement(self, s_n, s_a, tau):
        p = two_class_softmax(s_n, s_a, tau)
        q = two_class_softmax(s_a, s_n, tau)
        assert p + q == pytest.approx(1.0, abs=1e-9)


class TestScoreLayer:
    def test_identical_columns_give_half(self, rng):
        layer = random_layer(rng, dim=5, grid_h=3, grid_w=2)
        col = rng.standard_normal((5, 1))
        w = np.hstack([col, col])
        m, s = score_layer(layer, LayerWeights(w_cls=w, w_seg=w), tau=0.07)
        assert np.allclose(m, 0.5)
        assert s == pytest.approx(0.5)

    def test_single_cell_grid_matches_global(self, rng):
        token = rng.standard_normal(6)
        layer = LayerFeatures(block_index=0, global_token=token, patch_tokens=token.reshape(1, 1, 6))
        w = random_weights(rng, dim=6)
        w_same = LayerWeights(w_cls=w.w_seg, w_seg=w.w_seg)
        m, s = score_layer(layer, w_same, tau=0.3)
        assert s == pytest.approx(m[0, 0], abs=1e-12)

    def test_matches_per_cell_recomputation(self, rng):
        layer = random_layer(rng, dim=4, grid_h=2, grid_w=2)
        w = random_weights(rng, dim=4)
        tau = 0.7
        m, s = score_layer(layer, w, tau)
        for i in range(2):
            for j in range(2):
                t = layer.patch_tokens[i, j].astype(np.float64)
                sn = cosine_similarity(t, w.w_seg[:, 0])
                sa = cosine_similarity(t, w.w_seg[:, 1])
                assert m[i, j] == pytest.approx(two_class_softmax(sn, sa, tau), abs=1e-12)
        g = layer.global_token.astype(np.float64)
        sn = cosine_similarity(g, w.w_cls[:, 0])
        sa = cosine_similarity(g, w.w_cls[:, 1])
        assert s == pytest.approx(two_class_softmax(sn, sa, tau), abs=1e-12)

    def test_dim_mismatch(self, rng):
        layer = random_layer(rng, dim=4)
        with pytest.raises(ValidationError):
            score_layer(layer, random_weights(rng, dim=5), tau=0.07)

    def test_scale_invariance_of_weights_and_tokens(self, rng):
        layer = random_layer(rng, dim=6, grid_h=3, grid_w=3)
        w = random_weights(rng, dim=6)
        m0, s0 = score_layer(layer, w, tau=0.07)
        scaled_layer = LayerFeatures(
            block_index=layer.block_index,
            global_token=layer.global_token * 31.0,
            patch_tokens=layer.patch_tokens * 0.017,
        )
        scaled_w = LayerWeights(w_cls=w.w_cls * 7.3, w_seg=w.w_seg * 1234.5)
        m1, s1 = score_layer(scaled_layer, scaled_w, tau=0.07)
        assert np.allclose(m0, m1, atol=1e-6)
        assert s0 == pytest.approx(s1, abs=1e-6)

    def test_column_swap_complements_probabilities(self, rng):
        layer = random_layer(rng, dim=4, grid_h=2, grid_w=3)
        w = random_weights(rng, dim=4)
        swapped = LayerWeights(w_cls=w.w_cls[:, ::-1], w_seg=w.w_seg[:, ::-1])
        m0, s0 = score_layer(layer, w, tau=0.2)
        m1, s1 = score_layer(layer, swapped, tau=0.2)
        assert np.allclose(m0 + m1, 1.0, atol=1e-9)
        assert s0 + s1 == pytest.approx(1.0, abs=1e-9)


class TestScoreLayerShared:
    def test_equals_decoupled_with_tied_heads(self, rng):
        layer = random_layer(rng, dim=3, grid_h=2, grid_w=2)
        w = rng.standard_normal((3, 2))
        m0, s0 = score_layer_shared(layer, w, tau=0.5)
        m1, s1 = score_layer(layer, LayerWeights(w_cls=w, w_seg=w), tau=0.5)
        assert np.array_equal(m0, m1)
        assert s0 == s1

    def test_constant_token_grid_gives_constant_map(self, rng):
        token = rng.standard_normal(3)
        grid = np.broadcast_to(token, (2, 3, 3)).copy()
        layer = LayerFeatures(block_index=0, global_token=token, patch_tokens=grid)
        m, _ = score_layer_shared(layer, rng.standard_normal((3, 2)), tau=0.1)
        assert np.allclose(m, m[0, 0])

    def test_per_cell_oracle(self, rng):
        layer = random_layer(rng, dim=3, grid_h=2, grid_w=2)
        w = rng.standard_normal((3, 2))
        m, _ = score_layer_shared(layer, w, tau=0.9)
        for i in range(2):
            for j in range(2):
                t = layer.patch_tokens[i, j].astype(np.float64)
                expected = two_class_softmax(
                    cosine_similarity(t, w[:, 0]), cosine_similarity(t, w[:, 1]), 0.9
                )
                assert m[i, j] == pytest.approx(expected, abs=1e-12)


class TestAggregateLayers:
    def test_single_layer_identity(self, rng):
        m = rng.random((3, 3))
        out_map, out_score = aggregate_layers([m], [0.7])
        assert np.array_equal(out_map, m)
        assert out_score == pytest.approx(0.7)

    def test_constant_maps_average(self):
        a = np.full((2, 2), 0.2)
        b = np.full((2, 2), 0.4)
        out_map, _ = aggregate_layers([a, b], [0.0, 0.0])
        assert np.allclose(out_map, 0.3)

    def test_score_mean(self):
        _, s = aggregate_layers([np.zeros((1, 1))] * 3, [0.1, 0.5, 0.9])
        assert s == pytest.approx(0.5)

    def test_mixed_grids_resampled_to_finest(self, rng):
        coarse = np.full((2, 2), 0.5)
        fine = rng.random((4, 4))
        out_map, _ = aggregate_layers([coarse, fine], [0.0, 0.0])
        assert out_map.shape == (4, 4)
        assert np.allclose(out_map, (0.5 + fine) / 2.0)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            aggregate_layers([], [])


class TestUpsampleMap:
    def test_constant_grid(self):
        out = upsample_map(np.full((3, 2), 0.25), 7, 9)
        assert out.shape == (7, 9)
        assert np.allclose(out, 0.25)

    def test_one_by_one(self):
        out = upsample_map(np.array([[0.8]]), 4, 5)
        assert np.allclose(out, 0.8)

    def test_corner_aligned_closed_form(self):
        grid = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = upsample_map(grid, 2, 4)
        expected_row = np.array([0.0, 1 / 3, 2 / 3, 1.0])
        assert np.allclose(out[0], expected_row)
        assert np.allclose(out[1], expected_row)

    def test_range_preserved(self, rng):
        g = rng.random((5, 4))
        out = upsample_map(g, 32, 17)
        assert out.min() >= g.min() - 1e-12
        assert out.max() <= g.max() + 1e-12

    def test_downsample_also_within_range(self, rng):
        g = rng.random((9, 9))
        out = upsample_map(g, 3, 4)
        assert out.min() >= g.min() - 1e-12 and out.max() <= g.max() + 1e-12

    def test_bad_target_size(self):
        with pytest.raises(ValidationError):
            upsample_map(np.zeros((2, 2)), 0, 4)


class TestPredictZeroShot:
    def test_lambda_zero_uses_mean_cls_probability(self, rng):
        shapes = ((0, 4, 2, 2), (1, 4, 3, 3))
        stack = random_stack(rng, shapes)
        bank = random_bank(rng, shapes, lambda_p=0.0)
        pred = predict_zero_shot(stack, bank)
        scores = [score_layer(lf, lw, bank.tau)[1] for lf, lw in zip(stack.layers, bank.per_layer)]
        assert pred.score == pytest.approx(float(np.mean(scores)), abs=1e-12)

    def test_lambda_one_uses_map_max(self, rng):
        shapes = ((0, 4, 2, 2), (1, 4, 3, 3))
        stack = random_stack(rng, shapes)
        bank = random_bank(rng, shapes, lambda_p=1.0)
        pred = predict_zero_shot(stack, bank)
        assert pred.score == pytest.approx(float(pred.map.max()), abs=1e-12)

    def test_default_fusion_arithmetic(self, rng):
        shapes = ((0, 4, 2, 2),)
        stack = random_stack(rng, shapes)
        bank = random_bank(rng, shapes, lambda_p=0.5)
        pred = predict_zero_shot(stack, bank)
        _, _, grid_map, mean_score = zero_shot_parts(stack, bank)
        expected = 0.5 * mean_score + 0.5 * pred.map.max()
        assert pred.score == pytest.approx(expected, abs=1e-12)

    def test_output_ranges_and_shape(self, rng):
        stack = random_stack(rng, image_h=20, image_w=24)
        bank = random_bank(rng)
        pred = predict_zero_shot(stack, bank)
        assert pred.map.shape == (20, 24)
        assert 0.0 <= pred.map.min() and pred.map.max() <= 1.0
        assert 0.0 <= pred.score <= 1.0

    def test_deterministic_bit_identical(self, rng):
        stack = random_stack(rng)
        bank = random_bank(rng)
        a = predict_zero_shot(stack, bank)
        b = predict_zero_shot(stack, bank)
        assert np.array_equal(a.map, b.map)
        assert a.score == b.score

    def test_layer_mismatch_rejected(self, rng):
        stack = random_stack(rng, ((0, 4, 2, 2),))
        bank = random_bank(rng, ((0, 4, 2, 2), (1, 4, 3, 3)))
        with pytest.raises(ValidationError):
            predict_zero_shot(stack, bank)

    def test_block_index_mismatch_rejected(self, rng):
        stack = random_stack(rng, ((0, 4, 2, 2),))
        bank = random_bank(rng, ((5, 4, 2, 2),))
        with pytest.raises(ValidationError):
            predict_zero_shot(stack, bank)

    def test_keep_layer_maps(self, rng):
        stack = random_stack(rng)
        bank = random_bank(rng)
        pred = predict_zero_shot(stack, bank, keep_layer_maps=True)
        assert pred.per_layer_maps is not None and len(pred.per_layer_maps) == 2

    def test_scale_invariance_end_to_end(self, rng):
        shapes = ((2, 5, 2, 3), (4, 5, 4, 4))
        stack = random_stack(rng, shapes)
        bank = random_bank(rng, shapes, tau=0.07)
        scaled_stack = FeatureStack(
            layers=tuple(
                LayerFeatures(
                    block_index=lf.block_index,
                    global_token=lf.global_token * 3.0,
                    patch_tokens=lf.patch_tokens * 3.0,
                )
                for lf in stack.layers
            ),
            image_height=stack.image_height,
            image_width=stack.image_width,
        )
        scaled_bank = WeightBank(
            per_layer=tuple(
                LayerWeights(w_cls=lw.w_cls * 0.2, w_seg=lw.w_seg * 11.0) for lw in bank.per_layer
            ),
            block_indices=bank.block_indices,
            tau=bank.tau,
            lambda_p=bank.lambda_p,
            lambda_f=bank.lambda_f,
        )
        a = predict_zero_shot(stack, bank)
        b = predict_zero_shot(scaled_stack, scaled_bank)
        assert np.allclose(a.map, b.map, atol=1e-6)
        assert a.score == pytest.approx(b.score, abs=1e-6)
