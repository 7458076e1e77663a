"""Position-aware graph transformer recommender."""

from .data import (
    BipartiteGraph,
    DataError,
    InteractionDataset,
    NoiseSpec,
    SplitSpec,
    build_graph,
    inject_noise,
    load_interactions,
    one_sided_adjacency,
    save_interactions,
    split_by_ratio,
)
from .model import (
    ModelState,
    PGTRConfig,
    count_added_parameters,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    score,
)
from .train import (
    RankingMetrics,
    TrainConfig,
    evaluate,
    in_batch_negatives,
    ranking_metrics,
    ssm_loss,
    train,
)

__all__ = [
    "BipartiteGraph",
    "DataError",
    "InteractionDataset",
    "NoiseSpec",
    "SplitSpec",
    "build_graph",
    "inject_noise",
    "load_interactions",
    "one_sided_adjacency",
    "save_interactions",
    "split_by_ratio",
    "ModelState",
    "PGTRConfig",
    "count_added_parameters",
    "forward",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "score",
    "RankingMetrics",
    "TrainConfig",
    "evaluate",
    "in_batch_negatives",
    "ranking_metrics",
    "ssm_loss",
    "train",
]

__version__ = "0.1.0"
