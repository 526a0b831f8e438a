"""Desk-scale cross-view object correspondence with multimodal prompt fusion."""

from .masks import BinaryMask, MetricsReport, RleMask, contour_accuracy, iou, location_error
from .model import AlignConfig, FusionConfig, ModelConfig, ObjectRelator
from .synthgen import GeneratorConfig, PairSample, build_dataset, load_dataset, make_dataset
from .training import TrainConfig, evaluate, run, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "AlignConfig", "BinaryMask", "FusionConfig", "GeneratorConfig", "MetricsReport", "ModelConfig",
    "ObjectRelator", "PairSample", "RleMask", "TrainConfig", "build_dataset", "contour_accuracy",
    "evaluate", "iou", "load_dataset", "location_error", "make_dataset", "run", "run_ablation", "train",
]
