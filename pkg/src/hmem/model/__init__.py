"""Model parameters, forward scoring, gradients, training, checkpoints."""

from .backward import Gradients, gradients
from .checkpoint import load_checkpoint, save_checkpoint
from .forward import (
    QueryTrace,
    batch_loss,
    fit_stats,
    instance_query,
    loss,
    query_output,
    query_trace,
    resolved_tables,
    sample_negatives,
    score,
)
from .params import EmbeddingTable, ModelParams, Query, TrainConfig, init_params
from .training import TrainResult, train

__all__ = [
    "EmbeddingTable",
    "Gradients",
    "ModelParams",
    "Query",
    "QueryTrace",
    "TrainConfig",
    "TrainResult",
    "batch_loss",
    "fit_stats",
    "gradients",
    "init_params",
    "instance_query",
    "load_checkpoint",
    "loss",
    "query_output",
    "query_trace",
    "resolved_tables",
    "sample_negatives",
    "save_checkpoint",
    "score",
    "train",
]
