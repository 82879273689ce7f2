"""Input checks shared by the estimators, in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .geometry import Pose
from .voxel import INVALID, GridSpec, VoxelGrid
from .weights import WeightProfile, load_profile


def check_grid(grid, *, allow_invalid: bool = False, spec: GridSpec | None = None) -> VoxelGrid:
    if not isinstance(grid, VoxelGrid):
        raise TypeError(f"expected VoxelGrid, got {type(grid).__name__}")
    if spec is not None and grid.spec != spec:
        raise ValueError(f"grid spec {grid.spec} does not match {spec}")
    if not allow_invalid and grid.has_invalid:
        raise ValueError(f"frame {grid.frame_id}: predicted grid contains invalid label {INVALID}")
    return grid


def check_pose(pose) -> Pose:
    if isinstance(pose, Pose):
        return pose
    return Pose(pose)


def check_points(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite coordinates")
    return points


def check_profile(profile) -> WeightProfile:
    if isinstance(profile, WeightProfile):
        return profile
    if profile in ("camera", "lidar", "uniform"):
        return WeightProfile(mode=profile)
    return load_profile(profile)


def check_sequence(grids, poses) -> tuple[list, list]:
    if not isinstance(grids, Sequence) or not isinstance(poses, Sequence):
        grids, poses = list(grids), list(poses)
    if len(grids) != len(poses):
        raise ValueError(f"got {len(grids)} grids but {len(poses)} poses")
    return list(grids), list(poses)
