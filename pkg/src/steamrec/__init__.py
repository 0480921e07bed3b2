"""Sequential recommendation with learned sequence correction, on a small numpy autodiff core."""

from .data import CorruptionConfig, Dataset, EvalInstance, Op, Vocab
from .evaluation import EvalReport, disturbance, evaluate, hr_mrr
from .model import ModelConfig, ModelParameters, correct_sequence, next_item_scores
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CorruptionConfig",
    "Dataset",
    "EvalInstance",
    "EvalReport",
    "ModelConfig",
    "ModelParameters",
    "Op",
    "TrainConfig",
    "Vocab",
    "correct_sequence",
    "disturbance",
    "evaluate",
    "hr_mrr",
    "next_item_scores",
    "train",
]
