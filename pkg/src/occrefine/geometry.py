"""Rigid SE(3) poses, frame-chain composition and relative coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .voxel import VoxelGrid, voxel_centers

ORTHO_TOL = 1e-6
REPAIR_TOL = 1e-4
BOTTOM_TOL = 1e-9


def _orthonormality_error(rot: np.ndarray) -> tuple[float, float]:
    gram = np.abs(rot.T @ rot - np.eye(3)).max()
    det = abs(np.linalg.det(rot) - 1.0)
    return float(gram), float(det)


def reorthonormalize(rot: np.ndarray, max_iter: int = 20) -> np.ndarray:
    """Project a near-rotation onto SO(3) by iterating ``R <- R (3I - R^T R) / 2``."""
    rot = np.array(rot, dtype=np.float64)
    for _ in range(max_iter):
        gram = rot.T @ rot
        if np.abs(gram - np.eye(3)).max() < 1e-15:
            break
        rot = rot @ (3.0 * np.eye(3) - gram) / 2.0
    return rot


class Pose:
    """Homogeneous 4x4 rigid transform. Validated on construction; immutable."""

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64)
        if m.shape == (3, 4):
            m = np.vstack([m, [0.0, 0.0, 0.0, 1.0]])
        if m.shape != (4, 4):
            raise ValueError(f"pose must be 4x4 or 3x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("pose contains non-finite values")
        if np.abs(m[3] - [0.0, 0.0, 0.0, 1.0]).max() > BOTTOM_TOL:
            raise ValueError(f"pose bottom row must be (0, 0, 0, 1), got {m[3]}")
        m[3] = [0.0, 0.0, 0.0, 1.0]
        gram, det = _orthonormality_error(m[:3, :3])
        err = max(gram, det)
        if err > REPAIR_TOL:
            raise ValueError(f"rotation block is not orthonormal (error {err:.3g})")
        if err > ORTHO_TOL:
            m[:3, :3] = reorthonormalize(m[:3, :3])
        m.flags.writeable = False
        self._m = m

    @classmethod
    def _trusted(cls, m: np.ndarray) -> "Pose":
        p = cls.__new__(cls)
        m = np.array(m, dtype=np.float64)
        m[3] = [0.0, 0.0, 0.0, 1.0]
        m.flags.writeable = False
        p._m = m
        return p

    @classmethod
    def identity(cls) -> "Pose":
        return cls._trusted(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation=(0.0, 0.0, 0.0)) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def translation(cls, t) -> "Pose":
        return cls.from_rt(np.eye(3), t)

    @classmethod
    def rot_z(cls, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(angle), math.sin(angle)
        return cls.from_rt([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation)

    @classmethod
    def random(cls, rng: np.random.Generator, max_translation: float = 10.0) -> "Pose":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        rot = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls.from_rt(rot, rng.uniform(-max_translation, max_translation, size=3))

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @property
    def rotation(self) -> np.ndarray:
        return self._m[:3, :3]

    @property
    def translation_vector(self) -> np.ndarray:
        return self._m[:3, 3]

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation_vector

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self._m, other.matrix, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"Pose({np.array2string(self._m, precision=6, suppress_small=True)})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a @ b``: apply ``b`` first, then ``a``."""
    return Pose._trusted(a.matrix @ b.matrix)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    m = np.eye(4)
    m[:3, :3] = rt
    m[:3, 3] = -rt @ p.translation_vector
    return Pose._trusted(m)


@dataclass(frozen=True)
class FrameCalib:
    """LiDAR->camera extrinsic plus pinhole intrinsics (pixels)."""

    T_li_cam: Pose
    fx: float = 707.0912
    fy: float = 707.0912
    cx: float = 601.8873
    cy: float = 183.1104
    image_w: int = 1241
    image_h: int = 376

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.image_w < 1 or self.image_h < 1:
            raise ValueError("image size must be >= 1")

    @property
    def fov_w(self) -> float:
        return 2.0 * math.atan(self.image_w / (2.0 * self.fx))

    @property
    def fov_h(self) -> float:
        return 2.0 * math.atan(self.image_h / (2.0 * self.fy))


# KITTI axis convention: camera x = -lidar y, camera y = -lidar z, camera z = lidar x
KITTI_LIDAR_TO_CAMERA = Pose.from_rt([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_calib() -> FrameCalib:
    return FrameCalib(KITTI_LIDAR_TO_CAMERA)


def relative_pose(frame_i: Pose, pivot_t: Pose, calib: FrameCalib | Pose) -> Pose:
    """LiDAR_i -> LiDAR_t from camera->world poses, chained through the extrinsic.

    ``T_li_cam^-1 @ T_cam_t^-1 @ T_cam_i @ T_li_cam``
    """
    ext = calib.T_li_cam if isinstance(calib, FrameCalib) else calib
    return invert(ext) @ invert(pivot_t) @ frame_i @ ext


def relative_lidar_pose(frame_i: Pose, pivot_t: Pose) -> Pose:
    """LiDAR_i -> LiDAR_t when both poses already map LiDAR to world."""
    return invert(pivot_t) @ frame_i


def relative_coordinates(grid: VoxelGrid, rel: Pose) -> np.ndarray:
    """Voxel centers of ``grid`` expressed through ``rel``, shape (nx, ny, nz, 3)."""
    return rel.apply(voxel_centers(grid.spec))
