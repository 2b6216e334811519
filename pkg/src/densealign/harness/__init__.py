"""Training, evaluation, checkpointing, ablation and the command line."""

from .config import RunConfig, TrainConfig, lr_at
from .evaluate import EvalReport, evaluate, evaluate_checkpoint
from .train import TrainResult, train

__all__ = ["RunConfig", "TrainConfig", "lr_at", "EvalReport", "evaluate", "evaluate_checkpoint",
           "TrainResult", "train"]
