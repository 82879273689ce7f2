"""Multi-frame registration and weighted voxel voting.

Each source frame is devoxelized into a semantic point cloud, weighted by
the sensor that observed it, moved into the target LiDAR frame and
re-voxelized; the per-voxel class with the largest accumulated weight wins.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_grid, check_points, check_pose, check_profile, check_sequence
from .errors import MissingDataError
from .geometry import FrameCalib, Pose, relative_lidar_pose
from .voxel import FREE, INVALID, SEMANTIC_KITTI_CLASSES, GridSpec, VoxelGrid, points_to_indices, voxel_centers
from .weights import WeightProfile, sensor_weights

log = logging.getLogger(__name__)


@dataclass
class SemanticPointCloud:
    """Labeled points: (N, 3) meters, (N,) class ids and (N,) non-negative vote weights."""

    xyz: np.ndarray
    classes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.classes = np.asarray(self.classes, dtype=np.uint8).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not len(self.xyz) == len(self.classes) == len(self.weights):
            raise ValueError("xyz, classes and weights must have equal length")
        if np.any(self.classes == FREE) or np.any(self.classes == INVALID):
            raise ValueError("only occupied classes may appear in a semantic point cloud")
        if np.any(self.weights < 0):
            raise ValueError("vote weights must be non-negative")

    def __len__(self):
        return len(self.classes)

    @classmethod
    def empty(cls) -> "SemanticPointCloud":
        return cls(np.empty((0, 3)), np.empty(0, np.uint8), np.empty(0))


def devoxelize(grid: VoxelGrid) -> SemanticPointCloud:
    """One unit-weight point per occupied voxel, at the voxel center."""
    check_grid(grid)
    idx = grid.occupied_indices()
    classes = grid.labels[idx[:, 0], idx[:, 1], idx[:, 2]]
    return SemanticPointCloud(voxel_centers(grid.spec, idx), classes, np.ones(len(idx)))


def transform_cloud(cloud: SemanticPointCloud, rel: Pose) -> SemanticPointCloud:
    return SemanticPointCloud(check_pose(rel).apply(cloud.xyz), cloud.classes, cloud.weights)


def weight_cloud(cloud: SemanticPointCloud, profile: WeightProfile, lidar_to_camera=None) -> SemanticPointCloud:
    """Multiply each point's weight by the sensor weight at its current coordinates."""
    w = cloud.weights * sensor_weights(cloud.xyz, profile, lidar_to_camera)
    return SemanticPointCloud(cloud.xyz, cloud.classes, w)


class VoteAccumulator:
    """Per-voxel, per-class weight totals over a target volume.

    Storage is compact: only voxels that received at least one point hold a
    row. Within a voxel, additions happen strictly in arrival order, so the
    totals are reproducible for a fixed frame order.
    """

    def __init__(self, spec: GridSpec, num_classes: int = len(SEMANTIC_KITTI_CLASSES), dtype=np.float64):
        self.spec = spec
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        self.keys = np.empty(0, dtype=np.int64)
        self.values = np.zeros((0, self.num_classes), dtype=self.dtype)
        self.dropped = 0
        self.accepted = 0

    def add(self, linear: np.ndarray, classes: np.ndarray, weights: np.ndarray) -> None:
        """Accumulate votes at linear voxel offsets; classes are 1-based."""
        linear = np.asarray(linear, dtype=np.int64)
        if linear.size == 0:
            return
        new_keys = np.union1d(self.keys, linear)
        if len(new_keys) != len(self.keys):
            values = np.zeros((len(new_keys), self.num_classes), dtype=self.dtype)
            values[np.searchsorted(new_keys, self.keys)] = self.values
            self.keys, self.values = new_keys, values
        rows = np.searchsorted(self.keys, linear)
        cols = np.asarray(classes, dtype=np.int64) - 1
        np.add.at(self.values, (rows, cols), np.asarray(weights, dtype=self.dtype))
        self.accepted += linear.size

    @property
    def sums(self) -> np.ndarray:
        """Dense (nx * ny * nz * num_classes,) view of the totals."""
        dense = np.zeros((self.spec.num_voxels, self.num_classes), dtype=self.dtype)
        dense[self.keys] = self.values
        return dense.reshape(-1)

    @classmethod
    def from_dense(cls, spec: GridSpec, sums: np.ndarray, dtype=np.float64) -> "VoteAccumulator":
        sums = np.asarray(sums, dtype=dtype).reshape(spec.num_voxels, -1)
        acc = cls(spec, sums.shape[1], dtype)
        acc.keys = np.flatnonzero(sums.any(axis=1) | np.isnan(sums).any(axis=1)).astype(np.int64)
        acc.values = sums[acc.keys].copy()
        return acc


def voxelize_into(
    acc: VoteAccumulator,
    cloud: SemanticPointCloud,
    profile: WeightProfile | str = "uniform",
    cam_pose: Pose | FrameCalib | None = None,
) -> VoteAccumulator:
    """Drop each point into its half-open cell and add ``weight * sensor_weight``.

    Sensor weights are evaluated at the cloud's own coordinates with
    ``cam_pose`` as the LiDAR->camera extrinsic. Points outside the
    accumulator volume are counted in ``acc.dropped`` and ignored.
    """
    xyz = check_points(cloud.xyz)
    profile = check_profile(profile)
    w = cloud.weights
    if profile.mode != "uniform":
        w = w * sensor_weights(xyz, profile, cam_pose)
    _accumulate(acc, xyz, cloud.classes, w)
    return acc


def _linearize(xyz: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    idx, inside = points_to_indices(xyz, spec)
    _, ny, nz = spec.dims
    idx = idx[inside]
    return (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2], inside


def _accumulate(acc: VoteAccumulator, xyz, classes, weights) -> None:
    if np.any(classes > acc.num_classes):
        raise ValueError(f"class id exceeds accumulator's {acc.num_classes} classes")
    linear, inside = _linearize(xyz, acc.spec)
    acc.dropped += int((~inside).sum())
    acc.add(linear, classes[inside], weights[inside])


def _argmax_rows(values: np.ndarray) -> np.ndarray:
    """1-based winner per row; 0 where the row total is zero. Ties go to the lowest class id."""
    if np.isnan(values).any():
        raise RuntimeError("NaN in vote accumulator")
    winners = np.argmax(values, axis=1).astype(np.uint8) + 1
    winners[values.sum(axis=1) <= 0] = FREE
    return winners


def vote(acc: VoteAccumulator, frame_id: int = 0) -> VoxelGrid:
    labels = np.zeros(acc.spec.num_voxels, dtype=np.uint8)
    labels[acc.keys] = _argmax_rows(acc.values)
    return VoxelGrid(acc.spec, labels, frame_id, acc.num_classes)


@dataclass
class FusionStats:
    frames_used: int = 0
    points_in: int = 0
    points_dropped: int = 0
    window: tuple[int, int] = (0, 0)
    extra: dict = field(default_factory=dict)


def _slab_bounds(spec: GridSpec, parts: int) -> list[tuple[int, int]]:
    """Contiguous linear-offset ranges covering whole x-slabs."""
    nx, ny, nz = spec.dims
    parts = max(1, min(parts, nx))
    cuts = np.linspace(0, nx, parts + 1).round().astype(int)
    return [(int(a) * ny * nz, int(b) * ny * nz) for a, b in zip(cuts[:-1], cuts[1:])]


def _prepare(grid: VoxelGrid, profile: WeightProfile, calib) -> SemanticPointCloud:
    return weight_cloud(devoxelize(grid), profile, calib)


def fuse_window(
    frames,
    target_index: int,
    n: int = 25,
    profile: WeightProfile | str = "uniform",
    calib: FrameCalib | Pose | None = None,
    n_jobs: int = 1,
    dtype=np.float64,
    clouds: dict | None = None,
    stats: FusionStats | None = None,
) -> VoxelGrid:
    """Fuse the ``2n + 1`` frames around ``target_index`` into the target frame.

    ``frames`` is a sequence of ``(VoxelGrid, Pose)`` where each pose maps
    that frame's LiDAR coordinates to the world. Sensor weights are computed
    where each observation was made (the source frame), then the weighted
    points are registered into the target frame and voted. Frames are
    accumulated in ascending index order; the window is truncated at the
    sequence ends. ``clouds`` may cache weighted clouds per frame index.
    """
    profile = check_profile(profile)
    frames = list(frames)
    if not 0 <= target_index < len(frames):
        raise IndexError(f"target index {target_index} outside sequence of {len(frames)} frames")
    if n < 0:
        raise ValueError("temporal radius must be non-negative")
    lo, hi = max(0, target_index - n), min(len(frames) - 1, target_index + n)
    target_grid, target_pose = frames[target_index]
    check_grid(target_grid)
    if target_pose is None:
        raise MissingDataError(f"missing pose for frame {target_grid.frame_id}")
    spec = target_grid.spec
    slabs = _slab_bounds(spec, n_jobs)
    accs = [VoteAccumulator(spec, target_grid.num_classes, dtype) for _ in slabs]
    stats = stats if stats is not None else FusionStats()
    stats.window = (lo, hi)

    pool = ThreadPoolExecutor(len(slabs)) if len(slabs) > 1 else None
    try:
        for i in range(lo, hi + 1):
            grid, pose = frames[i]
            if pose is None:
                raise MissingDataError(f"missing pose for frame {grid.frame_id} (index {i})")
            if clouds is not None and i in clouds:
                cloud = clouds[i]
            else:
                cloud = _prepare(grid, profile, calib)
                if clouds is not None:
                    clouds[i] = cloud
            xyz = relative_lidar_pose(check_pose(pose), target_pose).apply(cloud.xyz)
            if not np.all(np.isfinite(xyz)):
                raise ValueError(f"non-finite coordinates in frame {grid.frame_id}")
            linear, inside = _linearize(xyz, spec)
            classes, weights = cloud.classes[inside], cloud.weights[inside]
            stats.frames_used += 1
            stats.points_in += len(cloud)
            stats.points_dropped += int((~inside).sum())
            if pool is None:
                accs[0].add(linear, classes, weights)
            else:

                def work(k, linear=linear, classes=classes, weights=weights):
                    a, b = slabs[k]
                    sel = (linear >= a) & (linear < b)
                    accs[k].add(linear[sel], classes[sel], weights[sel])

                list(pool.map(work, range(len(slabs))))
    finally:
        if pool is not None:
            pool.shutdown()

    labels = np.zeros(spec.num_voxels, dtype=np.uint8)
    for acc in accs:
        labels[acc.keys] = _argmax_rows(acc.values)
    return VoxelGrid(spec, labels, target_grid.frame_id, target_grid.num_classes)


def default_workers() -> int:
    return int(os.environ.get("OCCREFINE_WORKERS", "1"))


class WindowFusion(TransformerMixin, BaseEstimator):
    """Sliding-window multi-frame voting over a posed sequence.

    Parameters
    ----------
    n_radius : int
        Temporal radius; each output fuses up to ``2 * n_radius + 1`` frames.
    profile : {"camera", "lidar", "uniform"}, WeightProfile or path
        Sensor weighting applied in each observing frame.
    calib : FrameCalib or Pose, optional
        LiDAR->camera extrinsic used by the camera frustum test.
    n_jobs : int, optional
        Worker threads per fused frame; results do not depend on it.

    Examples
    --------
    >>> fused = WindowFusion(n_radius=5, profile="uniform").fit(grids, poses=poses).transform(grids)
    """

    def __init__(self, n_radius=25, profile="camera", calib=None, n_jobs=None):
        self.n_radius = n_radius
        self.profile = profile
        self.calib = calib
        self.n_jobs = n_jobs

    def fit(self, X, y=None, poses=None):
        if poses is None:
            raise ValueError("WindowFusion.fit requires the per-frame LiDAR->world poses")
        grids, poses = check_sequence(X, poses)
        self.poses_ = [None if p is None else check_pose(p) for p in poses]
        self.profile_ = check_profile(self.profile)
        self.n_frames_ = len(grids)
        return self

    def transform(self, X, targets=None):
        check_is_fitted(self, "poses_")
        grids = list(X)
        if len(grids) != self.n_frames_:
            raise ValueError(f"fitted on {self.n_frames_} frames, got {len(grids)}")
        frames = list(zip(grids, self.poses_))
        targets = range(len(frames)) if targets is None else targets
        n_jobs = self.n_jobs or default_workers()
        clouds: dict = {}
        out = []
        self.stats_ = []
        for t in targets:
            st = FusionStats()
            out.append(
                fuse_window(frames, t, self.n_radius, self.profile_, self.calib, n_jobs, clouds=clouds, stats=st)
            )
            self.stats_.append(st)
            # cached clouds outside the next window are no longer needed
            for k in [k for k in clouds if k < t + 1 - self.n_radius]:
                del clouds[k]
        return out
