"""nbalign: subject-indexing by embedding-space alignment.

Trains a per-dimension attention transform that moves article embeddings
toward the subject vocabulary they should retrieve, then serves cosine
nearest-subject queries and evaluation over the results.
"""

from .dataio import (
    EmbeddingMatrix,
    Record,
    RecordSet,
    SubjectCatalog,
    join_examples,
    read_catalog,
    read_embeddings,
    read_gold,
    read_judgments,
    read_predictions,
    read_records,
    write_embeddings,
    write_predictions,
)
from .errors import (
    ConfigError,
    ContractViolation,
    CorruptionError,
    CoverageError,
    DataError,
    DegenerateVectorError,
    FormatError,
    JoinError,
    NbalignError,
    NumericError,
    ParseError,
    SamplingError,
    ValidationError,
)
from .metrics import EvalReport, GoldLabels, JudgmentSet, eval_judged, eval_quantitative, f_beta, pr_at_k
from .model import ModelConfig, ModelParams, backward, forward, init_params, load_checkpoint, save_checkpoint, transform
from .objective import LossHyper, TrainingExample, cosine_distance, gold_average, margin_loss, sample_negatives
from .retrieval import RankingResult, SubjectIndex, batch_infer, build_index, query_topk
from .rng import RngState
from .trainer import OptimizerState, TrainConfig, TrainLog, adamw_step, cosine_lr, load_train_config, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "CorruptionError",
    "CoverageError",
    "DataError",
    "DegenerateVectorError",
    "EmbeddingMatrix",
    "EvalReport",
    "FormatError",
    "GoldLabels",
    "JoinError",
    "JudgmentSet",
    "LossHyper",
    "ModelConfig",
    "ModelParams",
    "NbalignError",
    "NumericError",
    "OptimizerState",
    "ParseError",
    "RankingResult",
    "Record",
    "RecordSet",
    "RngState",
    "SamplingError",
    "SubjectCatalog",
    "SubjectIndex",
    "TrainConfig",
    "TrainLog",
    "TrainingExample",
    "ValidationError",
    "adamw_step",
    "backward",
    "batch_infer",
    "build_index",
    "cosine_distance",
    "cosine_lr",
    "eval_judged",
    "eval_quantitative",
    "f_beta",
    "forward",
    "gold_average",
    "init_params",
    "join_examples",
    "load_checkpoint",
    "load_train_config",
    "margin_loss",
    "pr_at_k",
    "query_topk",
    "read_catalog",
    "read_embeddings",
    "read_gold",
    "read_judgments",
    "read_predictions",
    "read_records",
    "sample_negatives",
    "save_checkpoint",
    "train",
    "transform",
    "write_embeddings",
    "write_predictions",
]
