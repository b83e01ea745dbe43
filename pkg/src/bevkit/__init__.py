"""Training-time machinery for occupancy-guided cross-modal distillation.

Subpackages cover KITTI-format scene I/O, 3D/2D box geometry (including
the occlusion-aware intersection score), BEV occupancy-mask construction
and smoothing, masked distillation loss kernels, and the cross-modal
GT-sampling augmentation engine, plus a batch CLI tying them together.
"""

__version__ = "0.1.0"

from .cmaug import AugConfig, AugmentedScene, Scene, augment, build_gt_database
from .distill import LossConfig, PredictionMaps, feat_kd_loss, resp_kd_loss, total_kd_loss
from .geometry import Box3D, BevRect, DepthedBox2D, iou_2d, iou_bev, oais
from .occupancy import (
    GridConfig,
    SmoothingConfig,
    build_occupancy_mask,
    derive_bev_dims,
    gaussian_kernel,
    smooth_mask,
)
from .scene_io import (
    CalibMatrices,
    FormatError,
    GtDatabase,
    LabelRecord,
    ObjectSample,
    load_database,
    read_calib,
    read_image,
    read_labels,
    read_point_cloud,
    read_tensor,
    save_database,
    write_image,
    write_labels,
    write_point_cloud,
    write_tensor,
)

__all__ = [
    "AugConfig",
    "AugmentedScene",
    "Box3D",
    "BevRect",
    "CalibMatrices",
    "DepthedBox2D",
    "FormatError",
    "GridConfig",
    "GtDatabase",
    "LabelRecord",
    "LossConfig",
    "ObjectSample",
    "PredictionMaps",
    "Scene",
    "SmoothingConfig",
    "augment",
    "build_gt_database",
    "build_occupancy_mask",
    "derive_bev_dims",
    "feat_kd_loss",
    "gaussian_kernel",
    "iou_2d",
    "iou_bev",
    "load_database",
    "oais",
    "read_calib",
    "read_image",
    "read_labels",
    "read_point_cloud",
    "read_tensor",
    "resp_kd_loss",
    "save_database",
    "smooth_mask",
    "total_kd_loss",
    "write_image",
    "write_labels",
    "write_point_cloud",
    "write_tensor",
]
