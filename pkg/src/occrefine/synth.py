"""Synthetic street scenes, onboard-style noise and a brute-force voting oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import FrameCalib, Pose, default_calib
from .voxel import FREE, SEMANTIC_KITTI_CLASSES, GridSpec, VoxelGrid, class_id, voxel_centers
from .weights import WeightProfile, camera_weight, lidar_weight

NUM_CLASSES = len(SEMANTIC_KITTI_CLASSES)
SENSOR_HEIGHT = 1.8  # nine voxels, keeps frame and world lattices aligned


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int

    def mask(self, centers: np.ndarray) -> np.ndarray:
        return np.all((centers >= self.lo) & (centers < self.hi), axis=-1)

    def bounds(self):
        return self.lo, self.hi


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]
    radius: float
    z_range: tuple[float, float]
    label: int

    def mask(self, centers: np.ndarray) -> np.ndarray:
        dx = centers[..., 0] - self.center[0]
        dy = centers[..., 1] - self.center[1]
        z = centers[..., 2]
        return (dx * dx + dy * dy <= self.radius**2) & (z >= self.z_range[0]) & (z < self.z_range[1])

    def bounds(self):
        cx, cy = self.center
        r = self.radius
        return (cx - r, cy - r, self.z_range[0]), (cx + r, cy + r, self.z_range[1])


@dataclass(frozen=True)
class Ground:
    """Everything below ``height``; use boxes ("ribbons") on top for roads and sidewalks."""

    height: float
    label: int

    def mask(self, centers: np.ndarray) -> np.ndarray:
        return centers[..., 2] < self.height

    def bounds(self):
        return (-np.inf, -np.inf, -np.inf), (np.inf, np.inf, self.height)


@dataclass
class SceneConfig:
    seed: int
    spec: GridSpec
    primitives: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)

    @classmethod
    def street(
        cls,
        seed: int = 0,
        n_frames: int = 11,
        step: float = 1.0,
        yaw_rate: float = 0.0,
        lateral_margin: float = 26.0,
        primitive_density: float = 1.0,
    ) -> "SceneConfig":
        """A straight street along +x with sidewalks, buildings, trees, poles and parked cars.

        ``step`` should be a multiple of the voxel size so that frames sample
        the world without aliasing when ``yaw_rate`` is zero.
        """
        rng = np.random.default_rng(seed)
        length = (n_frames - 1) * step + 51.2 + 10.0
        x0 = -5.0
        nx = int(round(length / 0.2))
        ny = int(round(2 * lateral_margin / 0.2))
        spec = GridSpec((nx, ny, 32), (x0, -lateral_margin, SENSOR_HEIGHT - 2.0), (0.2, 0.2, 0.2))
        road, sidewalk, terrain = class_id("road"), class_id("sidewalk"), class_id("terrain")
        prims: list = [
            Ground(0.2, terrain),
            Box((-1e9, -4.0, -1e9), (1e9, 4.0, 0.2), road),
            Box((-1e9, -6.0, -1e9), (1e9, -4.0, 0.4), sidewalk),
            Box((-1e9, 4.0, -1e9), (1e9, 6.0, 0.4), sidewalk),
            Box((-1e9, 2.4, 0.2), (1e9, 2.8, 0.4), class_id("parking")),
        ]
        x_end = x0 + length

        def lateral(side, near, far):
            lo, hi = sorted((side * near, side * far))
            return lo, hi

        kinds = ["building", "tree", "fence", "pole", "sign", "car", "other-ground"]
        for side in (-1, 1):
            x = x0 + rng.uniform(0, 4)
            while x < x_end:
                kind = rng.choice(kinds, p=[0.3, 0.25, 0.1, 0.1, 0.08, 0.12, 0.05])
                gap = rng.uniform(1, 4) / primitive_density
                if kind == "building":
                    w, near = rng.uniform(6, 14), rng.uniform(9, 13)
                    y0, y1 = lateral(side, near, near + rng.uniform(5, 10))
                    prims.append(Box((x, y0, 0.2), (x + w, y1, rng.uniform(4, 6.2)), class_id("building")))
                elif kind == "tree":
                    w, cy = 0.0, side * rng.uniform(7, 9)
                    prims.append(Cylinder((x, cy), 0.3, (0.2, 2.2), class_id("trunk")))
                    prims.append(Cylinder((x, cy), rng.uniform(1.2, 2.2), (2.2, 5.0), class_id("vegetation")))
                elif kind == "fence":
                    w = rng.uniform(3, 8)
                    y0, y1 = lateral(side, 6.2, 6.6)
                    prims.append(Box((x, y0, 0.4), (x + w, y1, 1.6), class_id("fence")))
                elif kind == "pole":
                    w, cy = 0.0, side * rng.uniform(5.0, 5.6)
                    prims.append(Cylinder((x, cy), 0.2, (0.4, 4.0), class_id("pole")))
                elif kind == "sign":
                    w, cy = 0.0, side * rng.uniform(5.0, 5.6)
                    prims.append(Cylinder((x, cy), 0.15, (0.4, 2.4), class_id("pole")))
                    prims.append(Box((x - 0.4, cy - 0.1, 2.4), (x + 0.4, cy + 0.1, 3.2), class_id("traffic-sign")))
                elif kind == "car":
                    w = rng.uniform(3.6, 4.8)
                    y0, y1 = lateral(side, 2.6, 4.4)
                    prims.append(Box((x, y0, 0.4), (x + w, y1, 1.8), class_id("car")))
                else:
                    w = rng.uniform(4, 10)
                    y0, y1 = lateral(side, 6.0, 9.0)
                    prims.append(Box((x, y0, 0.0), (x + w, y1, 0.4), class_id("other-ground")))
                x += w + gap
        trajectory = [
            Pose.rot_z(yaw_rate * k, (round(k * step / 0.2) * 0.2, 0.0, SENSOR_HEIGHT)) for k in range(n_frames)
        ]
        return cls(seed, spec, prims, trajectory)


def generate_world(cfg: SceneConfig) -> VoxelGrid:
    """Rasterize primitives at voxel centers; later primitives overwrite earlier ones."""
    spec = cfg.spec
    centers = voxel_centers(spec)
    origin, dv, dims = np.asarray(spec.origin), np.asarray(spec.voxel_size), np.asarray(spec.dims)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for prim in cfg.primitives:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in prim.bounds())
        # conservative index window around the primitive's bounding box
        a = np.clip(np.floor((lo - origin) / dv) - 1, 0, dims).astype(int)
        b = np.clip(np.ceil((hi - origin) / dv) + 1, 0, dims).astype(int)
        if np.any(a >= b):
            continue
        window = (slice(a[0], b[0]), slice(a[1], b[1]), slice(a[2], b[2]))
        labels[window][prim.mask(centers[window])] = prim.label
    return VoxelGrid(cfg.spec, labels)


# Systematic long-range confusions of a camera model (pairs of look-alike classes)
_CONFUSED_NAMES = {
    "car": "truck", "truck": "car", "bicycle": "motorcycle", "motorcycle": "bicycle",
    "other-vehicle": "truck", "person": "bicyclist", "bicyclist": "person", "motorcyclist": "bicyclist",
    "road": "sidewalk", "sidewalk": "road", "parking": "other-ground", "other-ground": "parking",
    "building": "fence", "fence": "building", "vegetation": "terrain", "terrain": "vegetation",
    "trunk": "pole", "pole": "trunk", "traffic-sign": "pole",
}
FAR_CONFUSION = np.arange(NUM_CLASSES + 1, dtype=np.uint8)
for _a, _b in _CONFUSED_NAMES.items():
    FAR_CONFUSION[class_id(_a)] = class_id(_b)


@dataclass(frozen=True)
class NoiseModel:
    """Onboard-style corruption of occupied voxels.

    Outside the near box (LiDAR frame, default 25.6 m ahead by 25.6 m wide)
    ``far_flip_rate``, when set, replaces the uniform flips with systematic
    look-alike confusions (see ``FAR_CONFUSION``), mimicking the range-
    dependent bias of camera-based completion.
    """

    flip_rate: float = 0.0
    deletion_rate: float = 0.0
    hallucination_rate: float = 0.02
    far_flip_rate: float | None = None
    near_box: tuple = ((0.0, -12.8, -np.inf), (25.6, 12.8, np.inf))

    def __post_init__(self):
        for name in ("flip_rate", "deletion_rate", "hallucination_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def frustum_mask(spec: GridSpec, fov: WeightProfile | tuple[float, float], calib: FrameCalib | None = None) -> np.ndarray:
    """Boolean (nx, ny, nz) mask of voxels whose centers fall inside the camera frustum."""
    fov_w, fov_h = (fov.fov_w, fov.fov_h) if isinstance(fov, WeightProfile) else fov
    ext = (calib or default_calib()).T_li_cam
    pc = ext.apply(voxel_centers(spec))
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    return (np.abs(np.arctan2(x, z)) <= fov_w / 2) & (np.abs(np.arctan2(y, z)) <= fov_h / 2) & (z > 0)


def _crop(world: VoxelGrid, pose: Pose, spec: GridSpec) -> np.ndarray:
    """Nearest-cell lookup of each frame voxel center in the world grid."""
    wo, wd = np.asarray(world.spec.origin), np.asarray(world.spec.voxel_size)
    offset = (np.asarray(spec.origin) + pose.translation_vector - wo) / wd
    if np.array_equal(pose.rotation, np.eye(3)) and np.array_equal(np.asarray(spec.voxel_size), wd) \
            and np.allclose(offset, np.round(offset), atol=1e-6):
        # lattice-aligned translation: a plain shifted slice
        labels = np.zeros(spec.dims, dtype=np.uint8)
        off = np.round(offset).astype(int)
        src = [slice(max(o, 0), min(o + n, w)) for o, n, w in zip(off, spec.dims, world.spec.dims)]
        dst = [slice(s.start - o, s.stop - o) for s, o in zip(src, off)]
        if all(s.stop > s.start for s in src):
            labels[tuple(dst)] = world.labels[tuple(src)]
        return labels
    centers = pose.apply(voxel_centers(spec))
    idx = np.floor((centers - wo) / wd).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(world.spec.dims)), axis=-1)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    ii = idx[inside]
    labels[inside] = world.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
    return labels


def world_coverage(world_spec: GridSpec, pose: Pose, spec: GridSpec) -> np.ndarray:
    """Frame voxels whose centers land inside the world grid; the rest are unobserved."""
    centers = pose.apply(voxel_centers(spec))
    idx = np.floor((centers - np.asarray(world_spec.origin)) / np.asarray(world_spec.voxel_size))
    return np.all((idx >= 0) & (idx < np.asarray(world_spec.dims)), axis=-1)


def render_frame(
    world: VoxelGrid,
    pose: Pose,
    noise: NoiseModel | tuple[float, float] = NoiseModel(),
    frustum=None,
    rng: np.random.Generator | int | None = None,
    spec: GridSpec | None = None,
    calib: FrameCalib | None = None,
    frame_id: int = 0,
) -> VoxelGrid:
    """Crop ``world`` to the frame volume at ``pose`` (LiDAR->world) and corrupt it.

    A tuple ``noise`` is read as ``(flip_rate, deletion_rate)`` with no
    hallucination. ``frustum`` (a profile or ``(fov_w, fov_h)``) frees every
    voxel outside the camera's view.
    """
    if isinstance(noise, tuple):
        noise = NoiseModel(noise[0], noise[1], 0.0)
    rng = np.random.default_rng(rng)
    spec = spec or GridSpec()
    labels = _crop(world, pose, spec)

    occupied = labels != FREE
    u = rng.random(spec.dims)
    v = rng.random(spec.dims)
    deleted = occupied & (u < noise.deletion_rate)
    if noise.far_flip_rate is None:
        far = np.zeros(spec.dims, dtype=bool)
    else:
        lo, hi = noise.near_box
        c = voxel_centers(spec)
        far = ~np.all((c >= lo) & (c <= hi), axis=-1)
    survivors = occupied & ~deleted
    flipped = survivors & ~far & (v < noise.flip_rate)
    # uniform over the other classes: shift by 1..C-1 modulo C
    shift = rng.integers(1, NUM_CLASSES, size=int(flipped.sum()))
    confused = survivors & far & (v < (noise.far_flip_rate or 0.0))
    labels[confused] = FAR_CONFUSION[labels[confused]]
    labels[flipped] = ((labels[flipped].astype(np.int64) - 1 + shift) % NUM_CLASSES + 1).astype(np.uint8)
    labels[deleted] = FREE
    if noise.hallucination_rate > 0:
        ghost = ~occupied & (rng.random(spec.dims) < noise.hallucination_rate)
        labels[ghost] = rng.integers(1, NUM_CLASSES + 1, size=int(ghost.sum()))
    if frustum is not None:
        labels[~frustum_mask(spec, frustum, calib)] = FREE
    return VoxelGrid(spec, labels, frame_id)


def _mat(pose: Pose) -> list[list[float]]:
    return pose.matrix.tolist()


def _inverse(m):
    r = [[m[j][i] for j in range(3)] for i in range(3)]
    t = [-(r[i][0] * m[0][3] + r[i][1] * m[1][3] + r[i][2] * m[2][3]) for i in range(3)]
    return [r[0] + [t[0]], r[1] + [t[1]], r[2] + [t[2]], [0.0, 0.0, 0.0, 1.0]]


def _matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(4)) for j in range(4)] for i in range(4)]


def _apply(m, x, y, z):
    return (
        m[0][0] * x + m[0][1] * y + m[0][2] * z + m[0][3],
        m[1][0] * x + m[1][1] * y + m[1][2] * z + m[1][3],
        m[2][0] * x + m[2][1] * y + m[2][2] * z + m[2][3],
    )


def oracle_vote(
    frames: list[VoxelGrid],
    poses: list[Pose],
    target: int,
    weights: WeightProfile | None = None,
    calib: FrameCalib | None = None,
) -> VoxelGrid:
    """Loop-by-loop reference for windowed voting over ``frames`` (small grids only).

    Every occupied voxel of every frame votes, in frame order, for its class
    at the target voxel containing its registered center, with the sensor
    weight evaluated in the observing frame.
    """
    weights = weights or WeightProfile.uniform()
    ext = _mat((calib or default_calib()).T_li_cam)
    spec = frames[target].spec
    nx, ny, nz = spec.dims
    ox, oy, oz = spec.origin
    dx, dy, dz = spec.voxel_size
    sums: dict[tuple[int, int, int], list[float]] = {}
    inv_t = _inverse(_mat(poses[target]))
    for grid, pose in zip(frames, poses):
        rel = _matmul(inv_t, _mat(pose))
        sox, soy, soz = grid.spec.origin
        sdx, sdy, sdz = grid.spec.voxel_size
        labels = grid.labels.tolist()
        for i, plane in enumerate(labels):
            for j, row in enumerate(plane):
                for k, c in enumerate(row):
                    if c == 0:
                        continue
                    px, py, pz = sox + (i + 0.5) * sdx, soy + (j + 0.5) * sdy, soz + (k + 0.5) * sdz
                    if weights.mode == "camera":
                        w = camera_weight(_apply(ext, px, py, pz), weights, (px, py, pz))
                    elif weights.mode == "lidar":
                        w = lidar_weight(math.sqrt(px * px + py * py + pz * pz), weights)
                    else:
                        w = 1.0
                    tx, ty, tz = _apply(rel, px, py, pz)
                    a = math.floor((tx - ox) / dx)
                    b = math.floor((ty - oy) / dy)
                    d = math.floor((tz - oz) / dz)
                    if 0 <= a < nx and 0 <= b < ny and 0 <= d < nz:
                        cell = sums.setdefault((a, b, d), [0.0] * (grid.num_classes + 1))
                        cell[c] += 1.0 * w
    out = np.zeros(spec.dims, dtype=np.uint8)
    for (a, b, d), cell in sums.items():
        best, best_c = 0.0, 0
        for c in range(1, len(cell)):
            if cell[c] > best:
                best, best_c = cell[c], c
        out[a, b, d] = best_c
    return VoxelGrid(spec, out, frames[target].frame_id, frames[target].num_classes)

