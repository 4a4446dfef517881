from __future__ import annotations

import numpy as np
import pytest

from uniadet import ValidationError, predict_zero_shot
from uniadet.memory import (
    DISTANCE_NORMALIZER,
    MemoryBank,
    build_bank,
    few_shot_map,
    predict_few_shot,
    query_layer,
)
from uniadet.types import FeatureStack, LayerFeatures, WeightBank

from conftest import random_bank, random_layer, random_stack


def oracle_query(query, bank_layer):
    """Exhaustive double loop: per cell, per stored token, 1 - cosine."""
    gh, gw, d = query.patch_tokens.shape
    out = np.empty((gh, gw))
    for i in range(gh):
        for j in range(gw):
            t = query.patch_tokens[i, j].astype(np.float64)
            t = t / np.sqrt(np.sum(t * t))
            best = np.inf
            for m in np.asarray(bank_layer, dtype=np.float64):
                dist = 1.0 - np.sum(t * m)
                if dist < best:
                    best = dist
            out[i, j] = best
    return out


class TestBuildBank:
    def test_row_counting(self, rng):
        stack = random_stack(rng, ((0, 4, 2, 2),))
        bank = build_bank([stack], shots=1)
        assert bank.per_layer[0].shape == (4, 4)
        assert bank.shots == 1

    def test_duplicate_reference_changes_nothing(self, rng):
        stack = random_stack(rng, ((0, 4, 2, 2), (3, 4, 3, 3)))
        query = random_layer(rng, block_index=0, dim=4, grid_h=3, grid_w=2)
        one = build_bank([stack])
        two = build_bank([stack, stack])
        assert two.per_layer[0].shape[0] == 2 * one.per_layer[0].shape[0]
        assert np.array_equal(query_layer(query, one.per_layer[0]), query_layer(query, two.per_layer[0]))

    def test_prescaled_tokens_normalize_identically(self, rng):
        stack = random_stack(rng, ((0, 5, 2, 2),))
        scaled = FeatureStack(
            layers=(
                LayerFeatures(
                    block_index=0,
                    global_token=stack.layers[0].global_token,
                    patch_tokens=stack.layers[0].patch_tokens * 7.0,
                ),
            ),
            image_height=stack.image_height,
            image_width=stack.image_width,
        )
        a = build_bank([stack]).per_layer[0]
        b = build_bank([scaled]).per_layer[0]
        assert np.allclose(a, b, atol=1e-7)

    def test_unit_norm_invariant(self, rng):
        bank = build_bank([random_stack(rng)])
        for store in bank.per_layer:
            assert np.allclose(np.sqrt((store * store).sum(axis=1)), 1.0, atol=1e-12)

    def test_heterogeneous_layers_rejected(self, rng):
        a = random_stack(rng, ((0, 4, 2, 2),))
        b = random_stack(rng, ((0, 4, 3, 3),))
        with pytest.raises(ValidationError):
            build_bank([a, b])
        c = random_stack(rng, ((1, 4, 2, 2),))
        with pytest.raises(ValidationError):
            build_bank([a, c])

    def test_shot_count_must_match(self, rng):
        with pytest.raises(ValidationError):
            build_bank([random_stack(rng)], shots=2)


class TestQueryLayer:
    def test_token_present_in_bank_gives_zero(self, rng):
        stack = random_stack(rng, ((0, 6, 2, 2),))
        bank = build_bank([stack])
        dist = query_layer(stack.layers[0], bank.per_layer[0])
        assert np.allclose(dist, 0.0, atol=1e-12)

    def test_opposite_token_gives_two(self):
        token = np.array([1.0, 0.0, 0.0])
        layer = LayerFeatures(
            block_index=0, global_token=token, patch_tokens=(-token).reshape(1, 1, 3)
        )
        store = token.reshape(1, 3)
        dist = query_layer(layer, store)
        assert dist[0, 0] == pytest.approx(2.0)

    def test_matches_double_loop_oracle_bit_for_bit(self, rng):
        for _ in range(20):
            d = int(rng.integers(2, 9))
            layer = random_layer(rng, dim=d, grid_h=3, grid_w=3)
            shapes = ((0, d, int(rng.integers(1, 4)), int(rng.integers(2, 4))),)
            store = build_bank([random_stack(rng, shapes)]).per_layer[0]
            assert np.array_equal(query_layer(layer, store), oracle_query(layer, store))

    def test_bank_growth_never_increases_distance(self, rng):
        d = 6
        layer = random_layer(rng, dim=d, grid_h=3, grid_w=3)
        small = build_bank([random_stack(rng, ((0, d, 2, 2),))])
        big_store = np.vstack(
            [small.per_layer[0], build_bank([random_stack(rng, ((0, d, 2, 2),))]).per_layer[0]]
        )
        d_small = query_layer(layer, small.per_layer[0])
        d_big = query_layer(layer, big_store)
        assert np.all(d_big <= d_small + 1e-15)

    def test_distance_range(self, rng):
        layer = random_layer(rng, dim=8, grid_h=4, grid_w=4)
        store = build_bank([random_stack(rng, ((0, 8, 4, 4),))]).per_layer[0]
        dist = query_layer(layer, store)
        assert np.all(dist >= 0.0 - 1e-12) and np.all(dist <= 2.0 + 1e-12)

    def test_empty_store_rejected(self, rng):
        layer = random_layer(rng, dim=4)
        with pytest.raises(ValidationError):
            query_layer(layer, np.zeros((0, 4)))

    def test_dim_mismatch_rejected(self, rng):
        layer = random_layer(rng, dim=4)
        with pytest.raises(ValidationError):
            query_layer(layer, np.ones((3, 5)))


class TestPredictFewShot:
    shapes = ((0, 8, 3, 3), (2, 8, 4, 4))

    def test_lambda_f_zero_reproduces_zero_shot_exactly(self, rng):
        stack = random_stack(rng, self.shapes)
        bank = random_bank(rng, self.shapes, lambda_f=0.0)
        memory = build_bank([random_stack(rng, self.shapes)])
        zs = predict_zero_shot(stack, bank)
        fs = predict_few_shot(stack, bank, memory)
        assert np.array_equal(zs.map, fs.map)
        assert zs.score == fs.score

    def test_query_equals_reference_zeroes_few_shot_component(self, rng):
        stack = random_stack(rng, self.shapes)
        bank = random_bank(rng, self.shapes, lambda_f=0.5)
        memory = build_bank([stack])
        fs = predict_few_shot(stack, bank, memory)
        dist = few_shot_map(stack, memory)
        assert np.allclose(dist, 0.0, atol=1e-12)
        # fused grid is (1 - lambda_f) * zero-shot grid; check via lambda_p = 0 variant
        bank0 = WeightBank(
            per_layer=bank.per_layer,
            block_indices=bank.block_indices,
            tau=bank.tau,
            lambda_p=0.0,
            lambda_f=0.5,
        )
        zs0 = predict_zero_shot(stack, bank0)
        fs0 = predict_few_shot(stack, bank0, memory)
        assert np.allclose(fs0.map, 0.5 * zs0.map, atol=1e-12)

    def test_score_fusion_arithmetic(self, rng):
        stack = random_stack(rng, self.shapes)
        bank = random_bank(rng, self.shapes, lambda_p=0.5, lambda_f=0.5)
        memory = build_bank([random_stack(rng, self.shapes)])
        fs = predict_few_shot(stack, bank, memory)
        bank_p0 = WeightBank(
            per_layer=bank.per_layer, block_indices=bank.block_indices, tau=bank.tau,
            lambda_p=0.0, lambda_f=0.5,
        )
        base_score = predict_few_shot(stack, bank_p0, memory).score
        assert fs.score == pytest.approx(0.5 * base_score + 0.5 * fs.map.max(), abs=1e-12)

    def test_shot_order_invariance(self, rng):
        stack = random_stack(rng, self.shapes)
        bank = random_bank(rng, self.shapes)
        r1 = random_stack(rng, self.shapes, source_id="a")
        r2 = random_stack(rng, self.shapes, source_id="b")
        p_ab = predict_few_shot(stack, bank, build_bank([r1, r2]))
        p_ba = predict_few_shot(stack, bank, build_bank([r2, r1]))
        assert np.array_equal(p_ab.map, p_ba.map)
        assert p_ab.score == p_ba.score

    def test_fused_values_in_unit_interval(self, rng):
        stack = random_stack(rng, self.shapes)
        bank = random_bank(rng, self.shapes, lambda_f=1.0, lambda_p=1.0)
        memory = build_bank([random_stack(rng, self.shapes)])
        fs = predict_few_shot(stack, bank, memory)
        assert fs.map.min() >= 0.0 and fs.map.max() <= 1.0
        assert 0.0 <= fs.score <= 1.0

    def test_layer_mismatch_rejected(self, rng):
        stack = random_stack(rng, self.shapes)
        bank = random_bank(rng, self.shapes)
        memory = build_bank([random_stack(rng, ((0, 8, 3, 3),))])
        with pytest.raises(ValidationError):
            predict_few_shot(stack, bank, memory)

    def test_distance_normalizer_constant(self):
        assert DISTANCE_NORMALIZER == 2.0
