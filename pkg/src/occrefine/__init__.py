"""Offboard refinement of semantic occupancy predictions."""

from .citymap import CityMapBuilder, CityMapSpec, QuantizedAccumulator, accumulate_city, city_argmax, compute_world_bounds
from .dualflow import DualFlow4D, KernelConfig
from .errors import ChunkBudgetError, FormatError, MissingDataError, UndefinedLossError
from .fusion import (
    SemanticPointCloud,
    VoteAccumulator,
    WindowFusion,
    devoxelize,
    fuse_window,
    transform_cloud,
    vote,
    voxelize_into,
)
from .geometry import FrameCalib, Pose, compose, invert, relative_coordinates, relative_lidar_pose, relative_pose
from .kitti_io import SequenceManifest, read_invalid_mask, read_label_grid, read_poses, write_label_grid
from .losses import ce_loss, lovasz_loss, ssc_loss
from .metrics import ConfusionMatrix, accumulate_confusion, banded_eval, iou, miou
from .synth import NoiseModel, SceneConfig, generate_world, oracle_vote, render_frame
from .voxel import GridSpec, VoxelGrid, index_to_linear, voxel_center
from .weights import WeightProfile, camera_weight, lidar_weight

__version__ = "0.1.0"
