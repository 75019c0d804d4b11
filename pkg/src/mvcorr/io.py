"""Binary "MVDT" array container, rasters, feature grids and camera files.

MVDT layout (little-endian)::

    b"MVDT" | u32 version (=1) | u32 ndims | ndims x u32 dims | f32 payload

Rasters are stored with dims ``(height, width, channels)`` and feature grids
with ``(grid_h, grid_w, dim)``; both are row-major and channel-last, so the
payload order equals numpy C order of the in-memory array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, FormatError, ShapeError, TruncationError
from .geometry import CameraParams

MAGIC = b"MVDT"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def encode_array(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    if not np.all(np.isfinite(a)):
        raise DataError("array contains NaN or Inf")
    dims = a.shape
    head = _HEAD.pack(MAGIC, VERSION, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_array(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise TruncationError("file shorter than MVDT header")
    magic, version, ndims = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported MVDT version {version}")
    off = _HEAD.size + 4 * ndims
    if len(buf) < off:
        raise TruncationError("header declares more dims than present")
    dims = struct.unpack_from(f"<{ndims}I", buf, _HEAD.size)
    count = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    if len(buf) - off != 4 * count:
        raise TruncationError(
            f"payload has {len(buf) - off} bytes, header implies {4 * count}"
        )
    data = np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise DataError("payload contains NaN or Inf")
    return data.reshape(dims)


def write_array(arr: np.ndarray, path: str | Path) -> None:
    """Write any finite float array as an MVDT file (validated before opening)."""
    payload = encode_array(arr)
    Path(path).write_bytes(payload)


def read_array(path: str | Path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


@dataclass(frozen=True)
class Raster:
    """Image or depth map, ``data`` has shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3:
            raise ShapeError(f"raster must be 2-D or 3-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise DataError("raster contains NaN or Inf")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    __hash__ = None


def write_raster(r: Raster, path: str | Path) -> None:
    write_array(r.data, path)


def read_raster(path: str | Path) -> Raster:
    a = read_array(path)
    if a.ndim != 3:
        raise FormatError(f"raster file must have 3 dims, found {a.ndim}")
    return Raster(a)


def check_grid(grid: np.ndarray, name: str = "grid") -> np.ndarray:
    """Validate a feature grid of shape (grid_h, grid_w, dim) and return it as an array."""
    g = np.asarray(grid)
    if g.ndim != 3:
        raise ShapeError(f"{name} must have shape (h, w, dim), got {g.shape}")
    if g.shape[2] == 0:
        raise ShapeError(f"{name} has zero feature dimension")
    return g


def write_grid(grid: np.ndarray, path: str | Path) -> None:
    write_array(check_grid(grid), path)


def read_grid(path: str | Path) -> np.ndarray:
    a = read_array(path)
    if a.ndim != 3:
        raise FormatError(f"feature grid file must have 3 dims, found {a.ndim}")
    return check_grid(a)


@dataclass(frozen=True)
class MultiViewBatch:
    images: Sequence[Raster]
    depths: Sequence[Raster]
    cameras: Sequence[CameraParams]
    _depth_cache: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.images)
        if len(self.depths) != n or len(self.cameras) != n:
            raise ShapeError("images, depths and cameras must have equal length")
        if n == 0:
            return
        h, w = self.images[0].height, self.images[0].width
        for i in range(n):
            img, dep, cam = self.images[i], self.depths[i], self.cameras[i]
            if (img.height, img.width) != (h, w):
                raise ShapeError("all views must share image dimensions")
            if (dep.height, dep.width, dep.channels) != (h, w, 1):
                raise ShapeError(f"depth {i} must be {h}x{w}x1")
            if (cam.width, cam.height) != (w, h):
                raise ShapeError(f"camera {i} size does not match image size")
            if np.any(dep.data < 0):
                raise DataError(f"depth {i} has negative values")
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @property
    def n_views(self) -> int:
        return len(self.images)

    @property
    def width(self) -> int:
        return self.images[0].width

    @property
    def height(self) -> int:
        return self.images[0].height

    def depth(self, i: int) -> np.ndarray:
        """Depth map of view ``i`` as a float64 (H, W) array (cached)."""
        if not self._depth_cache:
            self._depth_cache.extend(
                np.ascontiguousarray(d.data[:, :, 0], dtype=np.float64) for d in self.depths
            )
        return self._depth_cache[i]


_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "w2c", "width", "height")


def write_cameras(cameras: Sequence[CameraParams], path: str | Path) -> None:
    """One JSON object per line with keys fx, fy, cx, cy, w2c (16 values, row-major), width, height."""
    lines = []
    for cam in cameras:
        rec = {
            "fx": float(cam.fx),
            "fy": float(cam.fy),
            "cx": float(cam.cx),
            "cy": float(cam.cy),
            "w2c": [float(v) for v in np.asarray(cam.w2c).reshape(-1)],
            "width": int(cam.width),
            "height": int(cam.height),
        }
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path: str | Path) -> list[CameraParams]:
    cams = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        missing = [k for k in _CAMERA_KEYS if k not in rec]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing fields {missing}")
        if len(rec["w2c"]) != 16:
            raise FormatError(f"{path}:{lineno}: w2c must have 16 values")
        cams.append(
            CameraParams(
                fx=rec["fx"],
                fy=rec["fy"],
                cx=rec["cx"],
                cy=rec["cy"],
                w2c=np.array(rec["w2c"], dtype=np.float64).reshape(4, 4),
                width=int(rec["width"]),
                height=int(rec["height"]),
            )
        )
    return cams
