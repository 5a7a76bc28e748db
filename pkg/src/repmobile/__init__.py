"""Reparameterizable mobile CNN for acoustic scene classification, trained by
multi-teacher distillation from a logits cache and shrunk by progressive pruning."""

from .complexity import complexity, count_macs, count_params
from .container import load_model, save_model
from .distill import DistillConfig, LogitsCache, ModelTeacher, cache_teachers, distill_loss, distill_train
from .model import build_model, forward, predict
from .pipeline import load_config, run_pipeline
from .pruning import PruneSchedule, progressive_prune, prune_to_width
from .reparam import reparameterize_model
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DistillConfig",
    "LogitsCache",
    "ModelTeacher",
    "PruneSchedule",
    "TrainConfig",
    "build_model",
    "cache_teachers",
    "complexity",
    "count_macs",
    "count_params",
    "distill_loss",
    "distill_train",
    "evaluate",
    "forward",
    "load_config",
    "load_model",
    "predict",
    "progressive_prune",
    "prune_to_width",
    "reparameterize_model",
    "run_pipeline",
    "save_model",
    "train",
]
