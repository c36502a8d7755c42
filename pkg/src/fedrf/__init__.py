"""Federated Random Forests: train locally, share only serialized trees,
merge by weighted tree sampling."""

from .aggregation import (
    AggregationStrategy,
    ClientWeights,
    aggregate,
    concat_aggregate,
    resolve_weights,
    uniform_aggregate,
)
from .dataset import DataParams, Dataset, load_dataset, save_dataset
from .forest import (
    ForestParams,
    Metrics,
    RandomForest,
    evaluate,
    fit_forest,
    predict,
    predict_batch,
    warm_start_extend,
)
from .wire import (
    Envelope,
    MessageKind,
    ModelParams,
    decode_forest,
    encode_forest,
    frame_read,
    frame_write,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationStrategy",
    "ClientWeights",
    "DataParams",
    "Dataset",
    "Envelope",
    "ForestParams",
    "MessageKind",
    "Metrics",
    "ModelParams",
    "RandomForest",
    "aggregate",
    "concat_aggregate",
    "decode_forest",
    "encode_forest",
    "evaluate",
    "fit_forest",
    "frame_read",
    "frame_write",
    "load_dataset",
    "predict",
    "predict_batch",
    "resolve_weights",
    "save_dataset",
    "uniform_aggregate",
    "warm_start_extend",
]
