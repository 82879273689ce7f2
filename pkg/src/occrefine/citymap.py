"""City-scale semantic maps: chunked uint8 vote counters and per-chunk argmax."""

from __future__ import annotations

import itertools
import logging
import math
import shutil
import tempfile
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_grid, check_pose, check_profile
from .errors import ChunkBudgetError
from .fusion import devoxelize, weight_cloud
from .geometry import Pose
from .kitti_io import write_label_grid
from .voxel import FREE, SEMANTIC_KITTI_PALETTE, STATIC_CLASSES, GridSpec, VoxelGrid, points_to_indices

log = logging.getLogger(__name__)

DEFAULT_SCALE = 100


@dataclass(frozen=True)
class CityMapSpec:
    world_spec: GridSpec
    chunk_dims: tuple[int, int, int] = (256, 256, 32)
    static_classes: tuple[int, ...] = STATIC_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "chunk_dims", tuple(int(c) for c in self.chunk_dims))
        object.__setattr__(self, "static_classes", tuple(sorted(int(c) for c in self.static_classes)))
        if min(self.chunk_dims) < 1:
            raise ValueError("chunk dims must be >= 1")
        if not self.static_classes or FREE in self.static_classes:
            raise ValueError("static_classes must list occupied class ids")

    @property
    def chunk_grid(self) -> tuple[int, int, int]:
        return tuple(-(-d // c) for d, c in zip(self.world_spec.dims, self.chunk_dims))

    @property
    def num_slots(self) -> int:
        return len(self.static_classes)

    def chunk_bytes(self) -> int:
        return math.prod(self.chunk_dims) * self.num_slots

    def chunk_shape(self, cidx) -> tuple[int, int, int]:
        """Voxel extent of chunk ``cidx``; the last chunk along an axis may be partial."""
        return tuple(min(c, d - i * c) for i, c, d in zip(cidx, self.chunk_dims, self.world_spec.dims))

    def chunk_spec(self, cidx) -> GridSpec:
        ws = self.world_spec
        origin = tuple(o + i * c * v for o, i, c, v in zip(ws.origin, cidx, self.chunk_dims, ws.voxel_size))
        return GridSpec(self.chunk_shape(cidx), origin, ws.voxel_size)

    def chunk_slices(self, cidx) -> tuple[slice, slice, slice]:
        return tuple(slice(i * c, i * c + n) for i, c, n in zip(cidx, self.chunk_dims, self.chunk_shape(cidx)))

    def class_lut(self) -> np.ndarray:
        """Class id -> slot index, -1 for classes that are filtered out."""
        lut = np.full(256, -1, dtype=np.int64)
        for slot, c in enumerate(self.static_classes):
            lut[c] = slot
        return lut


def compute_world_bounds(
    poses, frame_spec: GridSpec, chunk_dims=(256, 256, 32), static_classes=STATIC_CLASSES
) -> CityMapSpec:
    """Tight axis-aligned union of every frame volume placed in the world, rounded out to whole voxels."""
    poses = [check_pose(p) for p in poses]
    if not poses:
        raise ValueError("at least one pose is required")
    corners = frame_spec.corners()
    pts = np.concatenate([p.apply(corners) for p in poses])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    dv = np.asarray(frame_spec.voxel_size)
    span = (hi - lo) / dv
    # tolerate float noise so an exact multiple of the voxel size does not gain a voxel
    dims = np.maximum(np.ceil(span - 1e-6), 1).astype(int)
    world = GridSpec(tuple(int(d) for d in dims), tuple(float(v) for v in lo), frame_spec.voxel_size)
    return CityMapSpec(world, chunk_dims, static_classes)


class QuantizedAccumulator:
    """Per-chunk uint8 vote counters with saturating adds.

    At most ``max_active_chunks`` chunks stay resident; older ones are
    written to ``spill_dir`` (least recently used first). Without a spill
    directory, exceeding the ceiling raises :class:`ChunkBudgetError`.
    """

    def __init__(self, spec: CityMapSpec, scale: int = DEFAULT_SCALE, max_active_chunks: int | None = None,
                 spill_dir=None):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.spec = spec
        self.scale = scale
        self.max_active_chunks = max_active_chunks
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self._active: OrderedDict = OrderedDict()
        self._spilled: set = set()
        self.peak_active = 0
        self.accepted_points = 0
        self.dropped_points = 0
        self.filtered_points = 0

    @property
    def chunk_ids(self) -> list:
        return sorted(set(self._active) | self._spilled)

    def resident_bytes(self) -> int:
        return sum(a.nbytes for a in self._active.values())

    def _spill_path(self, cidx) -> Path:
        return self.spill_dir / ("chunk_%d_%d_%d.npy" % cidx)

    def _evict(self) -> None:
        cidx, arr = self._active.popitem(last=False)
        if self.spill_dir is None:
            self._active[cidx] = arr
            self._active.move_to_end(cidx, last=False)
            raise ChunkBudgetError(
                f"more than {self.max_active_chunks} map chunks would be resident; "
                "give a spill directory, raise the active-chunk limit or use smaller chunks"
            )
        self.spill_dir.mkdir(parents=True, exist_ok=True)
        np.save(self._spill_path(cidx), arr)
        self._spilled.add(cidx)

    def chunk(self, cidx) -> np.ndarray:
        """Writable counters of one chunk, shape ``chunk_shape + (num_slots,)``."""
        cidx = tuple(int(i) for i in cidx)
        if cidx in self._active:
            self._active.move_to_end(cidx)
            return self._active[cidx]
        if self.max_active_chunks is not None and len(self._active) >= self.max_active_chunks:
            self._evict()
        if cidx in self._spilled:
            arr = np.load(self._spill_path(cidx))
            self._spilled.discard(cidx)
            self._spill_path(cidx).unlink()
        else:
            arr = np.zeros(self.spec.chunk_shape(cidx) + (self.spec.num_slots,), dtype=np.uint8)
        self._active[cidx] = arr
        self.peak_active = max(self.peak_active, len(self._active))
        return arr

    def peek(self, cidx) -> np.ndarray | None:
        """Read-only access that leaves residency untouched; None for never-touched chunks."""
        cidx = tuple(cidx)
        if cidx in self._active:
            return self._active[cidx]
        if cidx in self._spilled:
            return np.load(self._spill_path(cidx))
        return None

    def add_points(self, xyz: np.ndarray, classes: np.ndarray, weights: np.ndarray) -> None:
        """Add ``round(weight * scale)`` (capped at 255) to each point's voxel/class counter."""
        slots = self.spec.class_lut()[np.asarray(classes)]
        keep = slots >= 0
        self.filtered_points += int((~keep).sum())
        idx, inside = points_to_indices(np.asarray(xyz)[keep], self.spec.world_spec)
        self.dropped_points += int((~inside).sum())
        idx, slots = idx[inside], slots[keep][inside]
        q = np.minimum(np.rint(np.asarray(weights)[keep][inside] * self.scale), 255).astype(np.int64)
        nz = q > 0
        idx, slots, q = idx[nz], slots[nz], q[nz]
        self.accepted_points += len(q)
        if not len(q):
            return
        cdims = np.asarray(self.spec.chunk_dims)
        cids = idx // cdims
        grid = np.asarray(self.spec.chunk_grid)
        clin = (cids[:, 0] * grid[1] + cids[:, 1]) * grid[2] + cids[:, 2]
        order = np.argsort(clin, kind="stable")
        bounds = np.flatnonzero(np.diff(clin[order])) + 1
        for part in np.split(order, bounds):
            cidx = tuple(int(v) for v in cids[part[0]])
            arr = self.chunk(cidx)
            local = idx[part] - np.asarray(cidx) * cdims
            flat = arr.reshape(-1)
            sy, sz, ns = arr.shape[1], arr.shape[2], arr.shape[3]
            keys = ((local[:, 0] * sy + local[:, 1]) * sz + local[:, 2]) * ns + slots[part]
            uniq, inv = np.unique(keys, return_inverse=True)
            inc = np.bincount(inv, weights=q[part]).astype(np.int64)
            flat[uniq] = np.minimum(flat[uniq].astype(np.int64) + inc, 255).astype(np.uint8)

    def cleanup(self) -> None:
        for cidx in list(self._spilled):
            self._spill_path(cidx).unlink(missing_ok=True)
        self._spilled.clear()
        self._active.clear()


def accumulate_city(
    frames,
    spec: CityMapSpec,
    profile="camera",
    calib=None,
    scale: int = DEFAULT_SCALE,
    max_active_chunks: int | None = None,
    spill_dir=None,
    acc: QuantizedAccumulator | None = None,
) -> QuantizedAccumulator:
    """Stream ``(VoxelGrid, Pose)`` frames (LiDAR->world poses) into quantized world counters.

    Only ``spec.static_classes`` vote; sensor weights are taken in each
    observing frame before registration.
    """
    profile = check_profile(profile)
    acc = acc or QuantizedAccumulator(spec, scale, max_active_chunks, spill_dir)
    lut = spec.class_lut()
    for grid, pose in frames:
        check_grid(grid)
        cloud = devoxelize(grid)
        keep = lut[cloud.classes] >= 0
        acc.filtered_points += int((~keep).sum())
        if not keep.any():
            continue
        cloud.xyz, cloud.classes, cloud.weights = cloud.xyz[keep], cloud.classes[keep], cloud.weights[keep]
        cloud = weight_cloud(cloud, profile, calib)
        acc.add_points(check_pose(pose).apply(cloud.xyz), cloud.classes, cloud.weights)
    return acc


def argmax_counters(counters: np.ndarray, static_classes) -> np.ndarray:
    """Winning class id per voxel; all-zero voxels are free, ties go to the lowest class id."""
    lut = np.asarray((FREE,) + tuple(static_classes), dtype=np.uint8)
    win = np.argmax(counters, axis=-1) + 1
    win[counters.max(axis=-1) == 0] = 0
    return lut[win]


def city_argmax(acc: QuantizedAccumulator, n_jobs: int = 1, include_empty: bool = False):
    """Yield ``(chunk_index, VoxelGrid)`` in ascending chunk order.

    Never-touched chunks are skipped unless ``include_empty``.
    """
    spec = acc.spec
    ids = (
        list(itertools.product(*(range(n) for n in spec.chunk_grid))) if include_empty else acc.chunk_ids
    )

    def one(cidx):
        counters = acc.peek(cidx)
        cs = spec.chunk_spec(cidx)
        if counters is None:
            return cidx, VoxelGrid.empty(cs)
        return cidx, VoxelGrid(cs, argmax_counters(counters, spec.static_classes))

    if n_jobs <= 1:
        for cidx in ids:
            yield one(cidx)
        return
    with ThreadPoolExecutor(n_jobs) as pool:
        for start in range(0, len(ids), n_jobs):
            yield from pool.map(one, ids[start:start + n_jobs])


def assemble(chunks, spec: CityMapSpec) -> VoxelGrid:
    """Stitch a chunk stream into one world grid (small maps only)."""
    labels = np.zeros(spec.world_spec.dims, dtype=np.uint8)
    for cidx, grid in chunks:
        labels[spec.chunk_slices(cidx)] = grid.labels
    return VoxelGrid(spec.world_spec, labels)


def _manifest(spec: CityMapSpec, entries, extra: dict | None = None) -> str:
    ws = spec.world_spec
    fmt = lambda v: " ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)  # noqa: E731
    lines = [
        "# occrefine city map",
        f"world_origin = {fmt(ws.origin)}",
        f"world_dims = {fmt(ws.dims)}",
        f"voxel_size = {fmt(ws.voxel_size)}",
        f"chunk_dims = {fmt(spec.chunk_dims)}",
        f"chunk_grid = {fmt(spec.chunk_grid)}",
        f"static_classes = {fmt(spec.static_classes)}",
        "palette = " + " ".join(f"{c}:{r},{g},{b}" for c, (r, g, b) in enumerate(SEMANTIC_KITTI_PALETTE.tolist())),
    ]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"config.{key} = {value}")
    for name, cidx, cs in entries:
        lines.append(f"chunk = {name} {fmt(cidx)} {fmt(cs.origin)} {fmt(cs.dims)}")
    return "\n".join(lines) + "\n"


def read_manifest(path) -> dict:
    out: dict = {"chunks": []}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "chunk":
            parts = value.split()
            out["chunks"].append(
                {"file": parts[0], "index": tuple(map(int, parts[1:4])),
                 "origin": tuple(map(float, parts[4:7])), "dims": tuple(map(int, parts[7:10]))}
            )
        elif key in ("world_dims", "chunk_dims", "chunk_grid", "static_classes"):
            out[key] = tuple(int(v) for v in value.split())
        elif key in ("world_origin", "voxel_size"):
            out[key] = tuple(float(v) for v in value.split())
        else:
            out[key] = value
    return out


_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def export_citymap(acc: QuantizedAccumulator, out_dir, ply: bool = False, n_jobs: int = 1,
                   config: dict | None = None) -> Path:
    """Write one label file per touched chunk, a text manifest and optionally a colored PLY."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    ply_tmp = None
    n_vertices = 0
    if ply:
        ply_tmp = tempfile.NamedTemporaryFile(dir=out_dir, suffix=".part", delete=False)
    try:
        for cidx, grid in city_argmax(acc, n_jobs):
            name = "chunk_%d_%d_%d.label" % cidx
            write_label_grid(grid, out_dir / name)
            entries.append((name, cidx, grid.spec))
            if ply_tmp is not None:
                from .voxel import voxel_centers

                occ = grid.occupied_indices()
                if len(occ):
                    rec = np.empty(len(occ), dtype=_PLY_VERTEX)
                    xyz = voxel_centers(grid.spec, occ)
                    rgb = SEMANTIC_KITTI_PALETTE[grid.labels[occ[:, 0], occ[:, 1], occ[:, 2]]]
                    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
                    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
                    ply_tmp.write(rec.tobytes())
                    n_vertices += len(occ)
        (out_dir / "manifest.txt").write_text(_manifest(acc.spec, entries, config))
        if ply_tmp is not None:
            ply_tmp.close()
            header = (
                "ply\nformat binary_little_endian 1.0\n"
                f"element vertex {n_vertices}\n"
                "property float x\nproperty float y\nproperty float z\n"
                "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
            )
            with open(out_dir / "citymap.ply", "wb") as fh:
                fh.write(header.encode("ascii"))
                with open(ply_tmp.name, "rb") as src:
                    shutil.copyfileobj(src, fh)
    finally:
        if ply_tmp is not None:
            ply_tmp.close()
            Path(ply_tmp.name).unlink(missing_ok=True)
    return out_dir


def read_ply_vertices(path) -> np.ndarray:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    return np.frombuffer(data[end:], dtype=_PLY_VERTEX)


class CityMapBuilder(BaseEstimator):
    """Fuse a whole posed sequence into a chunked world map of static classes.

    Parameters
    ----------
    chunk_dims : tuple of int
        Voxels per map chunk along x, y, z.
    scale : int
        Vote weight to uint8 counter multiplier.
    static_only : bool
        Drop dynamic classes before voting.
    profile : {"camera", "lidar", "uniform"}, WeightProfile or path
    calib : FrameCalib or Pose, optional
    max_active_chunks : int, optional
        Resident chunk ceiling; None means unlimited.
    spill_dir : path, optional
        Where evicted chunks are parked. Without one, exceeding the ceiling
        raises :class:`ChunkBudgetError`.
    n_jobs : int
    """

    def __init__(self, chunk_dims=(256, 256, 32), scale=DEFAULT_SCALE, static_only=True, profile="camera",
                 calib=None, max_active_chunks=None, spill_dir=None, n_jobs=1):
        self.chunk_dims = chunk_dims
        self.scale = scale
        self.static_only = static_only
        self.profile = profile
        self.calib = calib
        self.max_active_chunks = max_active_chunks
        self.spill_dir = spill_dir
        self.n_jobs = n_jobs

    def fit(self, X, y=None, poses=None, frame_spec: GridSpec | None = None):
        """``X`` is an iterable of grids (may be a generator); ``poses`` their LiDAR->world poses."""
        if poses is None:
            raise ValueError("CityMapBuilder.fit requires poses")
        poses = [check_pose(p) for p in poses]
        frame_spec = frame_spec or GridSpec()
        classes = STATIC_CLASSES if self.static_only else tuple(range(1, 20))
        self.spec_ = compute_world_bounds(poses, frame_spec, self.chunk_dims, classes)
        self.accumulator_ = QuantizedAccumulator(self.spec_, self.scale, self.max_active_chunks, self.spill_dir)
        accumulate_city(zip(X, poses), self.spec_, self.profile, self.calib, acc=self.accumulator_)
        return self

    def iter_chunks(self, include_empty=False):
        check_is_fitted(self, "accumulator_")
        return city_argmax(self.accumulator_, self.n_jobs, include_empty)

    def predict(self, X=None) -> VoxelGrid:
        """Assembled world grid; only sensible for maps that fit in memory."""
        return assemble(self.iter_chunks(), self.spec_)

    def export(self, out_dir, ply=False, config=None) -> Path:
        check_is_fitted(self, "accumulator_")
        return export_citymap(self.accumulator_, out_dir, ply, self.n_jobs, config)
