from __future__ import annotations

import numpy as np
import pytest

from uniadet.types import FeatureStack, LayerFeatures, LayerWeights, WeightBank


def random_layer(rng, block_index=0, dim=4, grid_h=2, grid_w=2) -> LayerFeatures:
    return LayerFeatures(
        block_index=block_index,
        global_token=rng.standard_normal(dim),
        patch_tokens=rng.standard_normal((grid_h, grid_w, dim)),
    )


def random_stack(rng, layer_shapes=((0, 4, 2, 2), (1, 4, 3, 3)), image_h=16, image_w=16, source_id=""):
    layers = tuple(random_layer(rng, b, d, gh, gw) for b, d, gh, gw in layer_shapes)
    return FeatureStack(layers=layers, image_height=image_h, image_width=image_w, source_id=source_id)


def random_weights(rng, dim=4) -> LayerWeights:
    return LayerWeights(w_cls=rng.standard_normal((dim, 2)), w_seg=rng.standard_normal((dim, 2)))


def random_bank(rng, layer_shapes=((0, 4, 2, 2), (1, 4, 3, 3)), tau=0.5, lambda_p=0.5, lambda_f=0.5) -> WeightBank:
    return WeightBank(
        per_layer=tuple(random_weights(rng, d) for _, d, _, _ in layer_shapes),
        block_indices=tuple(b for b, _, _, _ in layer_shapes),
        tau=tau,
        lambda_p=lambda_p,
        lambda_f=lambda_f,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
