"""Shared-encoder classification, detection and segmentation of grayscale scans."""

from ._core import (
    ConfigError,
    DataError,
    DivergenceError,
    Model,
    accuracy,
    box_from_mask,
    default_config,
    dice,
    evaluate,
    f1_score,
    generate_data,
    generate_synthetic,
    iou,
    load_dataset,
    loss_cls,
    loss_seg,
    mean_average_precision,
    run_protocol,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "Model",
    "accuracy",
    "box_from_mask",
    "default_config",
    "dice",
    "evaluate",
    "f1_score",
    "generate_data",
    "generate_synthetic",
    "iou",
    "load_dataset",
    "loss_cls",
    "loss_seg",
    "mean_average_precision",
    "run_protocol",
]
