"""Deformation-aware facade parsing: transconv kernels, generalized boxes,
convex regularization and score-threshold fusion."""
from .estimator import FacadeParser, TrainingDivergedError
from .geometry import (GeneralizedBBox, Polygon, boxes_from_corners, connected_components,
                       convex_hull, corners_from_boxes, gbbox_corners_from_mask, quad_iou,
                       rasterize_convex_polygon)
from .metrics import confusion_matrix, fuse, miou, pixel_accuracy
from .network import FacadeRCNN, LossReport, ModelConfig, total_loss
from .synth import LabeledSample, SceneParams, generate_dataset, generate_scene
from .tensor import Tensor, grad_check, no_grad
from .transconv import KernelGroupSpec, rotate_kernel, transconv_forward, transform_kernel

__version__ = "0.1.0"

__all__ = [
    "FacadeParser", "TrainingDivergedError", "GeneralizedBBox", "Polygon",
    "boxes_from_corners", "connected_components", "convex_hull", "corners_from_boxes",
    "gbbox_corners_from_mask", "quad_iou", "rasterize_convex_polygon", "confusion_matrix",
    "fuse", "miou", "pixel_accuracy", "FacadeRCNN", "LossReport", "ModelConfig",
    "total_loss", "LabeledSample", "SceneParams", "generate_dataset", "generate_scene",
    "Tensor", "grad_check", "no_grad", "KernelGroupSpec", "rotate_kernel",
    "transconv_forward", "transform_kernel",
]
