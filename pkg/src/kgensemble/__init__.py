"""Knowledge-graph embedding ensembles: train k low-dimensional replicas, average their scores."""

from .data import (
    DataError,
    Dataset,
    FilterIndex,
    SyntheticSpec,
    Vocabulary,
    build_filter_index,
    generate_synthetic,
    load_dataset,
    write_dataset,
)
from .embedding import ModelKind, ModelParams, init_model, xavier_init
from .ensemble import (
    CheckpointError,
    EnsembleError,
    EnsembleModel,
    VocabularyMismatch,
    ensemble_score,
    load_checkpoint,
    save_checkpoint,
    train_ensemble,
)
from .evaluation import MetricsReport, aggregate_runs, evaluate_model, metrics_from_ranks, rank_triples
from .patterns import categorize_relations, mine_symmetric, per_category_report
from .training import TrainConfig, TrainingError, train_with_early_stop

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "DataError", "Dataset", "EnsembleError", "EnsembleModel", "FilterIndex",
    "MetricsReport", "ModelKind", "ModelParams", "SyntheticSpec", "TrainConfig", "TrainingError",
    "Vocabulary", "VocabularyMismatch", "aggregate_runs", "build_filter_index", "categorize_relations",
    "ensemble_score", "evaluate_model", "generate_synthetic", "init_model", "load_checkpoint",
    "load_dataset", "metrics_from_ranks", "mine_symmetric", "per_category_report", "rank_triples",
    "save_checkpoint", "train_ensemble", "train_with_early_stop", "write_dataset", "xavier_init",
]
