"""Semantic voxel grids, grid geometry and the SemanticKITTI class taxonomy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FREE = 0
INVALID = 255

SEMANTIC_KITTI_CLASSES = (
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
)
SSCBENCH_KITTI360_NUM_CLASSES = 18

# car, bicycle, motorcycle, truck, other-vehicle, person, bicyclist, motorcyclist
DYNAMIC_CLASSES = frozenset(range(1, 9))
STATIC_CLASSES = tuple(c for c in range(1, 20) if c not in DYNAMIC_CLASSES)

# RGB palette of the SemanticKITTI API, indexed by train id
SEMANTIC_KITTI_PALETTE = np.array(
    [
        (0, 0, 0),
        (100, 150, 245),
        (100, 230, 245),
        (30, 60, 150),
        (80, 30, 180),
        (100, 80, 250),
        (255, 30, 30),
        (255, 40, 200),
        (150, 30, 90),
        (255, 0, 255),
        (255, 150, 255),
        (75, 0, 75),
        (175, 0, 75),
        (255, 200, 0),
        (255, 120, 50),
        (0, 175, 0),
        (135, 60, 0),
        (150, 240, 80),
        (255, 240, 150),
        (255, 0, 0),
    ],
    dtype=np.uint8,
)


def class_id(name: str) -> int:
    try:
        return SEMANTIC_KITTI_CLASSES.index(name) + 1
    except ValueError:
        raise KeyError(f"unknown class name {name!r}") from None


@dataclass(frozen=True)
class GridSpec:
    """Dense voxel volume: counts per axis, metric origin of the low corner, voxel edge lengths."""

    dims: tuple[int, int, int] = (256, 256, 32)
    origin: tuple[float, float, float] = (0.0, -25.6, -2.0)
    voxel_size: tuple[float, float, float] = (0.2, 0.2, 0.2)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(o) for o in self.origin)
        voxel_size = tuple(float(v) for v in self.voxel_size)
        if len(dims) != 3 or len(origin) != 3 or len(voxel_size) != 3:
            raise ValueError("GridSpec fields must be 3-vectors")
        if min(dims) < 1:
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if not all(v > 0 for v in voxel_size):
            raise ValueError(f"voxel sizes must be positive, got {voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", voxel_size)

    @classmethod
    def semantic_kitti(cls) -> "GridSpec":
        return cls()

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def upper(self) -> np.ndarray:
        """Metric coordinates of the high corner."""
        return np.asarray(self.origin) + np.asarray(self.dims) * np.asarray(self.voxel_size)

    def corners(self) -> np.ndarray:
        lo, hi = np.asarray(self.origin), self.upper
        return np.array(
            [[(lo, hi)[a][0], (lo, hi)[b][1], (lo, hi)[c][2]] for a in (0, 1) for b in (0, 1) for c in (0, 1)]
        )


def _check_index(i, spec: GridSpec) -> tuple[int, int, int]:
    ix, iy, iz = (int(v) for v in i)
    nx, ny, nz = spec.dims
    if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
        raise IndexError(f"voxel index {(ix, iy, iz)} out of bounds for dims {spec.dims}")
    return ix, iy, iz


def index_to_linear(i, spec: GridSpec) -> int:
    """Row-major offset with z fastest: ``(ix * ny + iy) * nz + iz``."""
    ix, iy, iz = _check_index(i, spec)
    _, ny, nz = spec.dims
    return (ix * ny + iy) * nz + iz


def linear_to_index(offset: int, spec: GridSpec) -> tuple[int, int, int]:
    offset = int(offset)
    if not 0 <= offset < spec.num_voxels:
        raise IndexError(f"linear offset {offset} out of bounds for {spec.num_voxels} voxels")
    _, ny, nz = spec.dims
    ixy, iz = divmod(offset, nz)
    ix, iy = divmod(ixy, ny)
    return ix, iy, iz


def voxel_center(i, spec: GridSpec) -> tuple[float, float, float]:
    ix, iy, iz = _check_index(i, spec)
    return tuple(o + (k + 0.5) * d for o, k, d in zip(spec.origin, (ix, iy, iz), spec.voxel_size))


def voxel_centers(spec: GridSpec, indices: np.ndarray | None = None) -> np.ndarray:
    """Centers for an (N, 3) index array, or the full (nx, ny, nz, 3) field when ``indices`` is None."""
    origin = np.asarray(spec.origin)
    dv = np.asarray(spec.voxel_size)
    if indices is None:
        axes = [o + (np.arange(n) + 0.5) * d for o, n, d in zip(spec.origin, spec.dims, spec.voxel_size)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return origin + (np.asarray(indices, dtype=np.float64) + 0.5) * dv


def points_to_indices(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Quantize metric points into half-open cells ``[lo, hi)``.

    Returns the (N, 3) integer indices and a boolean mask of points inside the volume.
    """
    points = np.asarray(points, dtype=np.float64)
    idx = np.floor((points - np.asarray(spec.origin)) / np.asarray(spec.voxel_size))
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx.astype(np.int64), inside


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Immutable dense semantic label volume of shape ``spec.dims`` (uint8, C order)."""

    spec: GridSpec
    labels: np.ndarray
    frame_id: int = 0
    num_classes: int = field(default=len(SEMANTIC_KITTI_CLASSES))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size != self.spec.num_voxels:
            raise ValueError(f"expected {self.spec.num_voxels} labels for dims {self.spec.dims}, got {labels.size}")
        if labels.dtype != np.uint8 and labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError("labels must fit in uint8")
        # own the buffer so the grid stays immutable
        labels = np.array(labels, dtype=np.uint8, order="C").reshape(self.spec.dims)
        bad = (labels > self.num_classes) & (labels != INVALID)
        if bad.any():
            raise ValueError(f"label {int(labels[bad][0])} outside 0..{self.num_classes} and not {INVALID}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @classmethod
    def empty(cls, spec: GridSpec, frame_id: int = 0, num_classes: int = len(SEMANTIC_KITTI_CLASSES)) -> "VoxelGrid":
        return cls(spec, np.zeros(spec.dims, dtype=np.uint8), frame_id, num_classes)

    @property
    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)

    @property
    def has_invalid(self) -> bool:
        return bool((self.labels == INVALID).any())

    def occupied_indices(self) -> np.ndarray:
        """(N, 3) indices of occupied voxels in linear order."""
        occ = (self.labels != FREE) & (self.labels != INVALID)
        return np.argwhere(occ)

    def with_labels(self, labels: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(self.spec, labels, self.frame_id, self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.labels, other.labels)

    __hash__ = None
