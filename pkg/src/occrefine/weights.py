"""Sensor-aware vote weights: camera frustum/near-box levels and LiDAR range attenuation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import FrameCalib, default_calib

MODES = ("camera", "lidar", "uniform")

_DEFAULT_CALIB = default_calib()


@dataclass(frozen=True)
class WeightProfile:
    """Voting-weight configuration.

    The near box is axis-aligned in the observing LiDAR frame; the default
    spans x in [0, 25.6], y in [-12.8, 12.8] and the full 6.4 m volume height.
    """

    mode: str = "camera"
    fov_w: float = _DEFAULT_CALIB.fov_w
    fov_h: float = _DEFAULT_CALIB.fov_h
    bbox_min: tuple[float, float, float] = (0.0, -12.8, -2.0)
    bbox_max: tuple[float, float, float] = (25.6, 12.8, 4.4)
    w_high: float = 1.0
    w_med: float = 0.1
    w_low: float = 0.01
    w_max: float = 10.0
    w_min: float = 0.1
    max_range: float = 51.2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "bbox_min", tuple(float(v) for v in self.bbox_min))
        object.__setattr__(self, "bbox_max", tuple(float(v) for v in self.bbox_max))
        if not self.w_high >= self.w_med >= self.w_low > 0:
            raise ValueError("camera weights must satisfy w_high >= w_med >= w_low > 0")
        if not self.w_max >= self.w_min > 0:
            raise ValueError("LiDAR weights must satisfy w_max >= w_min > 0")
        if not (0 < self.fov_w < math.pi and 0 < self.fov_h < math.pi):
            raise ValueError("fields of view must lie in (0, pi)")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if any(lo > hi for lo, hi in zip(self.bbox_min, self.bbox_max)):
            raise ValueError("bbox_min must not exceed bbox_max")

    @classmethod
    def camera(cls, calib: FrameCalib | None = None, **kw) -> "WeightProfile":
        if calib is not None:
            kw.setdefault("fov_w", calib.fov_w)
            kw.setdefault("fov_h", calib.fov_h)
        return cls(mode="camera", **kw)

    @classmethod
    def lidar(cls, **kw) -> "WeightProfile":
        return cls(mode="lidar", **kw)

    @classmethod
    def uniform(cls) -> "WeightProfile":
        return cls(mode="uniform")

    @property
    def bounds(self) -> tuple[float, float]:
        """Smallest and largest weight this profile can assign."""
        if self.mode == "camera":
            return self.w_low, self.w_high
        if self.mode == "lidar":
            return self.w_min, self.w_max
        return 1.0, 1.0

    def with_mode(self, mode: str) -> "WeightProfile":
        return replace(self, mode=mode)


_FLOAT_KEYS = ("fov_w", "fov_h", "w_high", "w_med", "w_low", "w_max", "w_min", "max_range")
_VEC_KEYS = ("bbox_min", "bbox_max")


def load_profile(path: str | Path) -> WeightProfile:
    """Read a ``key = value`` profile file.

    Recognised keys: mode, fov_w, fov_h (radians), bbox_min, bbox_max
    (three comma-separated meters), w_high, w_med, w_low, w_max, w_min,
    max_range. ``#`` starts a comment; unspecified keys keep their defaults.
    """
    kw: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "mode":
                kw[key] = value
            elif key in _FLOAT_KEYS:
                kw[key] = float(value)
            elif key in _VEC_KEYS:
                vec = tuple(float(v) for v in value.replace(",", " ").split())
                if len(vec) != 3:
                    raise ValueError("expected three values")
                kw[key] = vec
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return WeightProfile(**kw)


def dump_profile(profile: WeightProfile) -> str:
    lines = []
    for key, value in asdict(profile).items():
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def in_frustum(p_cam, profile: WeightProfile) -> bool:
    x, y, z = (float(v) for v in p_cam)
    return (
        abs(math.atan2(x, z)) <= profile.fov_w / 2
        and abs(math.atan2(y, z)) <= profile.fov_h / 2
        and z > 0
    )


def in_bbox(p, profile: WeightProfile) -> bool:
    return all(lo <= float(v) <= hi for v, lo, hi in zip(p, profile.bbox_min, profile.bbox_max))


def camera_weight(p_cam, profile: WeightProfile, p_box=None) -> float:
    """Weight of one point given in camera coordinates.

    ``p_box`` is the same point in the frame the near box is defined in (the
    LiDAR frame); it defaults to ``p_cam`` when the two frames coincide.
    """
    if in_frustum(p_cam, profile):
        return profile.w_high if in_bbox(p_cam if p_box is None else p_box, profile) else profile.w_med
    return profile.w_low


def lidar_weight(r: float, profile: WeightProfile) -> float:
    if r < 0 or math.isnan(r):
        raise ValueError(f"radial distance must be non-negative, got {r}")
    if r >= profile.max_range:
        return profile.w_min
    return profile.w_max - (profile.w_max - profile.w_min) * r / profile.max_range


def camera_weights(p_cam: np.ndarray, p_box: np.ndarray, profile: WeightProfile) -> np.ndarray:
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    frustum = (
        (np.abs(np.arctan2(x, z)) <= profile.fov_w / 2)
        & (np.abs(np.arctan2(y, z)) <= profile.fov_h / 2)
        & (z > 0)
    )
    box = np.all((p_box >= np.asarray(profile.bbox_min)) & (p_box <= np.asarray(profile.bbox_max)), axis=1)
    return np.where(frustum, np.where(box, profile.w_high, profile.w_med), profile.w_low)


def lidar_weights(r: np.ndarray, profile: WeightProfile) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("radial distances must be non-negative")
    w = profile.w_max - (profile.w_max - profile.w_min) * r / profile.max_range
    return np.where(r >= profile.max_range, profile.w_min, w)


def sensor_weights(points: np.ndarray, profile: WeightProfile, lidar_to_camera=None) -> np.ndarray:
    """Per-point weights for LiDAR-frame points observed by the frame's own sensors."""
    points = np.asarray(points, dtype=np.float64)
    if profile.mode == "uniform":
        return np.ones(len(points))
    if profile.mode == "lidar":
        return lidar_weights(np.sqrt(np.sum(points * points, axis=1)), profile)
    ext = (lidar_to_camera if lidar_to_camera is not None else _DEFAULT_CALIB.T_li_cam)
    ext = ext.T_li_cam if isinstance(ext, FrameCalib) else ext
    return camera_weights(ext.apply(points), points, profile)
