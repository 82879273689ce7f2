"""Readers and writers for the SemanticKITTI SSC voxel layout, odometry poses and calibration.

Layout: ``sequences/<id>/voxels/<scan>.label`` (uint16 little-endian raw
labels), ``<scan>.invalid`` (bit-packed, MSB first), ``poses.txt`` (one
3x4 camera->world matrix per scan) and ``calib.txt`` (``Tr:`` LiDAR->camera).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import FormatError, MissingDataError
from .geometry import FrameCalib, Pose, compose, invert
from .voxel import INVALID, GridSpec, VoxelGrid


@dataclass(frozen=True)
class LabelMap:
    """Raw dataset label ids <-> training class ids."""

    forward: dict
    inverse: dict

    @property
    def num_classes(self) -> int:
        return max(self.inverse)

    def lut(self) -> np.ndarray:
        """Raw -> train lookup table; unmapped entries hold -1."""
        table = np.full(max(max(self.forward) + 1, 65536), -1, dtype=np.int32)
        for raw, train in self.forward.items():
            table[raw] = train
        return table

    def inverse_lut(self) -> np.ndarray:
        table = np.full(256, -1, dtype=np.int32)
        for train, raw in self.inverse.items():
            table[train] = raw
        return table


def load_label_map(path: str | Path | None = None) -> LabelMap:
    """Load a ``learning_map``/``learning_map_inv`` YAML; defaults to the bundled SemanticKITTI table."""
    if path is None:
        return _default_map()
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    return LabelMap({int(k): int(v) for k, v in cfg["learning_map"].items()},
                    {int(k): int(v) for k, v in cfg["learning_map_inv"].items()})


@lru_cache(maxsize=1)
def _default_map() -> LabelMap:
    text = resources.files("occrefine.data").joinpath("semantic-kitti.yaml").read_text()
    cfg = yaml.safe_load(text)
    return LabelMap({int(k): int(v) for k, v in cfg["learning_map"].items()},
                    {int(k): int(v) for k, v in cfg["learning_map_inv"].items()})


def read_label_grid(path, spec: GridSpec | None = None, label_map: LabelMap | None = None, frame_id=None) -> VoxelGrid:
    spec = spec or GridSpec()
    label_map = label_map or _default_map()
    path = Path(path)
    raw = path.read_bytes()
    expected = spec.num_voxels * 2
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<u2")
    mapped = label_map.lut()[values]
    if np.any(mapped < 0):
        bad = np.unique(values[mapped < 0])
        raise FormatError(f"{path}: unknown raw labels {bad.tolist()}")
    if frame_id is None:
        frame_id = _frame_number(path)
    return VoxelGrid(spec, mapped.astype(np.uint8), frame_id, label_map.num_classes)


def write_label_grid(grid: VoxelGrid, path, label_map: LabelMap | None = None) -> None:
    label_map = label_map or _default_map()
    if grid.has_invalid:
        raise ValueError("cannot write a grid containing invalid (255) labels")
    raw = label_map.inverse_lut()[grid.flat]
    if np.any(raw < 0):
        bad = np.unique(grid.flat[raw < 0])
        raise ValueError(f"class ids {bad.tolist()} have no raw label")
    Path(path).write_bytes(raw.astype("<u2").tobytes())


def read_invalid_mask(path, spec: GridSpec | None = None) -> np.ndarray:
    """Boolean volume of invalid voxels; bits are packed most-significant first."""
    spec = spec or GridSpec()
    raw = Path(path).read_bytes()
    expected = -(-spec.num_voxels // 8)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="big")[: spec.num_voxels]
    return bits.astype(bool).reshape(spec.dims)


def write_invalid_mask(mask: np.ndarray, path) -> None:
    Path(path).write_bytes(np.packbits(np.asarray(mask, dtype=bool).reshape(-1), bitorder="big").tobytes())


def apply_invalid(grid: VoxelGrid, mask: np.ndarray) -> VoxelGrid:
    labels = grid.labels.copy()
    labels[np.asarray(mask, dtype=bool).reshape(grid.spec.dims)] = INVALID
    return grid.with_labels(labels)


def _parse_matrix(values: list[str], where: str) -> np.ndarray:
    if len(values) != 12:
        raise FormatError(f"{where}: expected 12 values, got {len(values)}")
    try:
        m = np.array([float(v) for v in values]).reshape(3, 4)
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None
    return np.vstack([m, [0.0, 0.0, 0.0, 1.0]])


def read_calib(path) -> dict[str, np.ndarray]:
    """All ``KEY: 12 floats`` entries of a KITTI calib file as 4x4 matrices."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'KEY: values'")
        key, rest = line.split(":", 1)
        out[key.strip()] = _parse_matrix(rest.split(), f"{path}:{lineno}")
    if "Tr" not in out:
        raise FormatError(f"{path}: no 'Tr:' line")
    return out


def read_frame_calib(path, image_size=(1241, 376), camera: str = "P2") -> FrameCalib:
    """LiDAR->camera extrinsic and intrinsics for ``camera`` (falls back to the reference camera)."""
    calib = read_calib(path)
    tr = Pose(calib["Tr"])
    if camera not in calib:
        return FrameCalib(tr, image_w=image_size[0], image_h=image_size[1])
    p = calib[camera]
    fx, fy, cx, cy = p[0, 0], p[1, 1], p[0, 2], p[1, 2]
    # rectified projection P = K [I | t]; recover the camera's offset from the reference camera
    t = np.array([(p[0, 3] - cx * p[2, 3]) / fx, (p[1, 3] - cy * p[2, 3]) / fy, p[2, 3]])
    return FrameCalib(compose(Pose.translation(t), tr), fx, fy, cx, cy, image_size[0], image_size[1])


def read_camera_poses(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            poses.append(Pose(_parse_matrix(line.split(), f"{path}:{lineno}")))
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return poses


def read_poses(poses_path, calib_path) -> list[Pose]:
    """Per-scan LiDAR->world poses, ``Tr^-1 @ P_i @ Tr``."""
    tr = Pose(read_calib(calib_path)["Tr"])
    tr_inv = invert(tr)
    return [tr_inv @ p @ tr for p in read_camera_poses(poses_path)]


def write_poses(lidar_poses, poses_path, tr: Pose) -> None:
    """Inverse of :func:`read_poses`: store ``Tr @ L_i @ Tr^-1`` as camera poses."""
    tr_inv = invert(tr)
    lines = []
    for pose in lidar_poses:
        m = (tr @ pose @ tr_inv).matrix[:3].reshape(-1)
        lines.append(" ".join(f"{v:.12e}" for v in m))
    Path(poses_path).write_text("\n".join(lines) + "\n")


def write_calib(calib: FrameCalib, path, tr: Pose | None = None) -> None:
    """Minimal KITTI calib file with ``P0``/``P2`` and ``Tr``."""
    tr = tr or calib.T_li_cam
    k = np.array([[calib.fx, 0.0, calib.cx, 0.0], [0.0, calib.fy, calib.cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    p2 = k.copy()
    offset = compose(calib.T_li_cam, invert(tr)).translation_vector
    p2[:, 3] = k[:, :3] @ offset
    rows = {"P0": k, "P2": p2, "Tr": tr.matrix[:3]}
    Path(path).write_text("".join(f"{key}: " + " ".join(f"{v:.12e}" for v in m.reshape(-1)) + "\n"
                                  for key, m in rows.items()))


def _frame_number(path: Path) -> int:
    m = re.match(r"(\d+)", path.stem)
    return int(m.group(1)) if m else 0


@dataclass
class SequenceManifest:
    """Label frames of one sequence with their scan-indexed poses.

    Voxel frames exist only for every fifth scan; each file's numeric stem
    is its scan index into ``poses``.
    """

    root: Path
    sequence: str
    label_dir: Path
    frame_ids: list[int]
    poses: list[Pose]
    calib: FrameCalib
    files: dict = field(default_factory=dict)

    @classmethod
    def load(cls, seq_dir, label_subdir: str = "voxels", require_poses: bool = True) -> "SequenceManifest":
        seq_dir = Path(seq_dir)
        label_dir = seq_dir / label_subdir
        if not label_dir.is_dir():
            raise MissingDataError(f"label directory {label_dir} not found")
        poses_path, calib_path = seq_dir / "poses.txt", seq_dir / "calib.txt"
        for p in (poses_path, calib_path):
            if require_poses and not p.is_file():
                raise MissingDataError(f"{p} not found")
        files = {_frame_number(p): p for p in sorted(label_dir.glob("*.label"))}
        if not files:
            raise MissingDataError(f"no .label files in {label_dir}")
        poses = read_poses(poses_path, calib_path) if require_poses else []
        calib = read_frame_calib(calib_path) if calib_path.is_file() else FrameCalib(Pose.identity())
        frame_ids = sorted(files)
        if require_poses and frame_ids[-1] >= len(poses):
            raise MissingDataError(f"frame {frame_ids[-1]} has no pose ({len(poses)} poses in {poses_path})")
        return cls(seq_dir.parent, seq_dir.name, label_dir, frame_ids, poses, calib, files)

    def pose(self, frame_id: int) -> Pose:
        return self.poses[frame_id]

    def read(self, frame_id: int, spec: GridSpec | None = None) -> VoxelGrid:
        return read_label_grid(self.files[frame_id], spec, frame_id=frame_id)

    def invalid_path(self, frame_id: int) -> Path:
        return self.files[frame_id].with_suffix(".invalid")
