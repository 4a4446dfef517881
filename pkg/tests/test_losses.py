from __future__ import annotations

import math

import numpy as np
import pytest

from uniadet import ValidationError
from uniadet.losses import (
    cross_entropy_loss,
    dice_loss,
    focal_loss,
    pool_mask_to_grid,
)


class TestCrossEntropy:
    def test_confident_correct_is_near_zero(self):
        assert cross_entropy_loss(1.0 - 1e-9, 1) == pytest.approx(0.0, abs=1e-5)

    def test_half_gives_ln2(self):
        assert cross_entropy_loss(0.5, 0) == pytest.approx(math.log(2))
        assert cross_entropy_loss(0.5, 1) == pytest.approx(math.log(2))

    def test_confident_wrong(self):
        assert cross_entropy_loss(0.9, 0) == pytest.approx(-math.log(0.1), abs=1e-9)

    def test_clamping_keeps_finite(self):
        assert np.isfinite(cross_entropy_loss(0.0, 1))
        assert np.isfinite(cross_entropy_loss(1.0, 0))

    def test_nonnegative(self):
        for p in (0.01, 0.3, 0.5, 0.77, 0.999):
            for y in (0, 1):
                assert cross_entropy_loss(p, y) >= 0.0

    def test_bad_label(self):
        with pytest.raises(ValidationError):
            cross_entropy_loss(0.5, 2)


class TestFocal:
    def test_gamma_zero_equals_mean_cross_entropy(self, rng):
        p = rng.uniform(0.05, 0.95, (3, 4))
        m = (rng.random((3, 4)) < 0.5).astype(np.uint8)
        expected = np.mean(
            [cross_entropy_loss(pv, int(mv)) for pv, mv in zip(p.ravel(), m.ravel())]
        )
        assert focal_loss(p, m, gamma=0.0, alpha=1.0) == pytest.approx(expected, abs=1e-12)

    def test_perfect_map_is_zero(self):
        m = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        p = m.astype(np.float64)
        assert focal_loss(p, m, gamma=2.0) == pytest.approx(0.0, abs=1e-5)

    def test_single_pixel_value(self):
        # p_t = 0.5, gamma=2: 0.25 * ln 2
        assert focal_loss(np.array([[0.5]]), np.array([[1]]), gamma=2.0, alpha=1.0) == pytest.approx(
            0.25 * math.log(2), abs=1e-12
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            focal_loss(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_nonnegative(self, rng):
        p = rng.uniform(0.0, 1.0, (5, 5))
        m = (rng.random((5, 5)) < 0.3).astype(np.uint8)
        assert focal_loss(p, m) >= 0.0


class TestDice:
    def test_exact_match_binary(self):
        m = np.array([[1, 0], [1, 0]], dtype=np.uint8)
        assert dice_loss(m.astype(float), m, smooth=0.0) == pytest.approx(0.0)
        assert dice_loss(m.astype(float), m, smooth=1.0) == pytest.approx(0.0, abs=0.25)

    def test_disjoint_is_one(self):
        p = np.array([[1.0, 0.0], [1.0, 0.0]])
        m = np.array([[0, 1], [0, 1]], dtype=np.uint8)
        assert dice_loss(p, m, smooth=0.0) == pytest.approx(1.0)

    def test_half_constant_map(self):
        p = np.full((2, 2), 0.5)
        m = np.array([[1, 1], [0, 0]], dtype=np.uint8)
        assert dice_loss(p, m, smooth=0.0) == pytest.approx(0.5)

    def test_range(self, rng):
        for _ in range(10):
            p = rng.uniform(0, 1, (4, 4))
            m = (rng.random((4, 4)) < 0.4).astype(np.uint8)
            v = dice_loss(p, m, smooth=1.0)
            assert 0.0 <= v <= 1.0

    def test_empty_everything_with_smooth_zero_rejected(self):
        with pytest.raises(ValidationError):
            dice_loss(np.zeros((2, 2)), np.zeros((2, 2), dtype=np.uint8), smooth=0.0)


class TestMaskPooling:
    def test_any_pixel_marks_patch(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[5, 6] = 1
        grid = pool_mask_to_grid(mask, 2, 2)
        assert grid.tolist() == [[0, 0], [0, 1]]

    def test_identity_when_same_size(self):
        mask = np.eye(4, dtype=np.uint8)
        assert np.array_equal(pool_mask_to_grid(mask, 4, 4), mask)

    def test_non_divisible_sizes(self):
        mask = np.zeros((7, 5), dtype=np.uint8)
        mask[0, 0] = 1
        grid = pool_mask_to_grid(mask, 3, 2)
        assert grid[0, 0] == 1 and grid.sum() == 1

    def test_grid_larger_than_mask_rejected(self):
        with pytest.raises(ValidationError):
            pool_mask_to_grid(np.zeros((4, 4), dtype=np.uint8), 8, 8)
