"""Multi-preference sequential recommendation on a small numpy autodiff core."""

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .data import (
    EncodedDataset,
    SplitDataset,
    SyntheticSpec,
    TrainingExample,
    build_training_examples,
    encode_and_filter,
    generate_synthetic,
    ingest_events,
    leave_one_out_split,
)
from .evaluation import MetricSummary, evaluate, hit_rate, ndcg, rank_positive
from .model import MODEL_KINDS, MpmConfig, init_params, predict
from .trainer import TrainConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "MODEL_KINDS",
    "EncodedDataset",
    "MetricSummary",
    "MpmConfig",
    "SplitDataset",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "TrainingExample",
    "backward",
    "build_training_examples",
    "encode_and_filter",
    "evaluate",
    "finite_difference_check",
    "generate_synthetic",
    "hit_rate",
    "ingest_events",
    "init_params",
    "leave_one_out_split",
    "ndcg",
    "predict",
    "rank_positive",
    "train",
]
