"""Hybrid convolutional/state-space U-Net for multi-class ultrasound
segmentation, with a synthetic phantom dataset, compound Dice/focal
training objective, five-metric evaluation, and a verification suite that
certifies gradients and core algebraic laws."""

__version__ = "0.1.0"

from .blocks import (ADFF, ConcatFusion, MCAttnConfig, McatBottleneck,
                     MonteCarloAttention, PatchEmbed, PatchExpand, PatchMerge,
                     SSMcatBlock)
from .data import (AugmentConfig, CLASS_NAMES, NUM_CLASSES, OVERLAY_COLORS,
                   Sample, augment, load_dataset, save_sample, split_dataset)
from .errors import (CheckpointError, ConfigError, DataError, EvaluationError,
                     MSUError, ShapeError, VerificationError)
from .estimator import MSUMambaSegmenter, check_image_array, check_mask_array
from .gradcheck import GradReport, finite_difference_check, module_grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossConfig, combined_loss, dice_loss, focal_loss
from .metrics import (ConfusionCounts, MetricReport, compute_metrics,
                      confusion_accumulate, macro_average)
from .network import (ModelConfig, MSUMamba, build_model, count_parameters,
                      parameter_breakdown, tiny_config)
from .phantom import PhantomSpec, check_ring_containment, generate_phantom, synthesize_dataset
from .ssm import (SS2D, VSSBlock, cross_merge, cross_scan, selective_scan,
                  selective_scan_reference)
from .train import RunConfig, evaluate_model, run_training, train_steps

__all__ = [
    "ADFF", "AugmentConfig", "CLASS_NAMES", "CheckpointError", "ConcatFusion",
    "ConfigError", "ConfusionCounts", "DataError", "EvaluationError",
    "GradReport", "LossConfig", "MCAttnConfig", "MSUError", "MSUMamba",
    "MSUMambaSegmenter", "McatBottleneck", "MetricReport", "ModelConfig",
    "MonteCarloAttention", "NUM_CLASSES", "OVERLAY_COLORS", "PatchEmbed",
    "PatchExpand", "PatchMerge", "PhantomSpec", "RunConfig", "SS2D",
    "SSMcatBlock", "Sample", "ShapeError", "VSSBlock", "VerificationError",
    "augment", "build_model", "check_image_array", "check_mask_array",
    "check_ring_containment", "combined_loss", "compute_metrics",
    "confusion_accumulate", "count_parameters", "cross_merge", "cross_scan",
    "dice_loss", "evaluate_model", "finite_difference_check", "focal_loss",
    "generate_phantom", "load_checkpoint", "load_dataset", "macro_average",
    "module_grad_check", "parameter_breakdown", "run_training",
    "save_checkpoint", "save_sample", "selective_scan",
    "selective_scan_reference", "split_dataset", "synthesize_dataset",
    "tiny_config", "train_steps",
]
