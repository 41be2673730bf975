"""Scale-aware attention network for crack segmentation: model, training, evaluation."""

from .config import (
    AugmentConfig,
    ConfigError,
    DataConfig,
    DataError,
    DivergenceError,
    LossConfig,
    ModelConfig,
    PriorConfig,
    RunConfig,
    TrainConfig,
    default_scale_weights,
    load_run_config,
)
from .losses import (
    focal_loss,
    lovasz_hinge_loss,
    median_frequency_weights,
    soft_iou_loss,
    total_focal_loss,
    total_loss,
    weighted_bce_loss,
)
from .metrics import (
    MetricReport,
    auprc,
    confusion_counts,
    iterative_threshold,
    pixel_scores,
    pr_curve,
    region_scores,
    score_maps,
    threshold_sweep,
)
from .model import (
    SCNet,
    attention_parameter_count,
    init_weights,
    load_checkpoint,
    parameter_count,
    predict,
    save_checkpoint,
)
from .prior import EdgePrior, assemble_input, sobel_edge_map
from .synth import generate_corpus
from .trainer import evaluate, materialize, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "ConfigError",
    "DataConfig",
    "DataError",
    "DivergenceError",
    "LossConfig",
    "MetricReport",
    "ModelConfig",
    "PriorConfig",
    "RunConfig",
    "SCNet",
    "TrainConfig",
    "EdgePrior",
    "assemble_input",
    "attention_parameter_count",
    "auprc",
    "confusion_counts",
    "default_scale_weights",
    "evaluate",
    "focal_loss",
    "generate_corpus",
    "init_weights",
    "iterative_threshold",
    "load_checkpoint",
    "load_run_config",
    "lovasz_hinge_loss",
    "materialize",
    "median_frequency_weights",
    "parameter_count",
    "pixel_scores",
    "pr_curve",
    "predict",
    "region_scores",
    "run_ablation",
    "save_checkpoint",
    "score_maps",
    "sobel_edge_map",
    "soft_iou_loss",
    "threshold_sweep",
    "total_focal_loss",
    "total_loss",
    "train",
    "weighted_bce_loss",
]
