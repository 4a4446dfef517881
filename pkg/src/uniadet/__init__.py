"""Language-free universal visual anomaly detection over frozen vision features.

Two inference paths share one learned artifact: a zero-shot path scoring
cosine similarity between tokens and per-layer decoupled two-class weights,
and a training-free few-shot path measuring nearest-neighbor patch distance
against normal reference images. Training fits only the weight pairs with
analytic gradients; the feature extractor stays frozen behind a provider
interface.
"""

from .errors import FormatError, NumericError, UniAdetError, ValidationError
from .types import (
    ANOMALY_COLUMN,
    NORMAL_COLUMN,
    AnomalyPrediction,
    FeatureStack,
    LayerFeatures,
    LayerWeights,
    Raster,
    TrainSample,
    WeightBank,
)
from .scoring import (
    aggregate_layers,
    cosine_similarity,
    predict_zero_shot,
    score_layer,
    score_layer_shared,
    two_class_softmax,
    upsample_map,
)

__version__ = "0.1.0"

__all__ = [
    "ANOMALY_COLUMN",
    "NORMAL_COLUMN",
    "AnomalyPrediction",
    "FeatureStack",
    "FormatError",
    "LayerFeatures",
    "LayerWeights",
    "NumericError",
    "Raster",
    "TrainSample",
    "UniAdetError",
    "ValidationError",
    "WeightBank",
    "aggregate_layers",
    "cosine_similarity",
    "predict_zero_shot",
    "score_layer",
    "score_layer_shared",
    "two_class_softmax",
    "upsample_map",
]
