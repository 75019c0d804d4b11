"""Pinhole camera math and depth-based pixel transfer between views.

Pixel coordinates are continuous with integer values at pixel centres, so
pixel (i, j) of a raster sits at x=i, y=j. Cameras follow the OpenCV
convention (x right, y down, z forward) and ``w2c`` maps world to camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import BehindCameraError, CameraError, InvalidDepthError

DEFAULT_TOL_PX = 1.0
DEFAULT_TOL_DEPTH = 0.05


@dataclass(frozen=True, eq=False)
class CameraParams:
    fx: float
    fy: float
    cx: float
    cy: float
    w2c: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        m = np.array(self.w2c, dtype=np.float64).reshape(4, 4)
        m.setflags(write=False)
        object.__setattr__(self, "w2c", m)
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError("principal point outside the image")
        rot = m[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5) or abs(np.linalg.det(rot) - 1) > 1e-5:
            raise CameraError("w2c rotation block is not a proper rotation")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise CameraError("w2c last row must be [0, 0, 0, 1]")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @property
    def c2w(self) -> np.ndarray:
        """Closed-form rigid inverse of ``w2c``."""
        r, t = self.w2c[:3, :3], self.w2c[:3, 3]
        out = np.eye(4)
        out[:3, :3] = r.T
        out[:3, 3] = -r.T @ t
        return out

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def transformed(self, rigid: np.ndarray) -> "CameraParams":
        """Camera after moving the whole world by ``rigid`` (4x4, world to world)."""
        inv = np.linalg.inv(rigid)
        return CameraParams(self.fx, self.fy, self.cx, self.cy, self.w2c @ inv, self.width, self.height)

    def __eq__(self, other):
        if not isinstance(other, CameraParams):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height)
            and np.array_equal(self.w2c, other.w2c)
        )

    __hash__ = None


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear upwards in the image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = -rot @ eye
    return m


def back_project(pixel, depth: float, cam: CameraParams) -> np.ndarray:
    """World point seen at ``pixel`` with camera-space depth ``depth``."""
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    x, y = pixel
    p_cam = np.array([(x - cam.cx) * depth / cam.fx, (y - cam.cy) * depth / cam.fy, depth, 1.0])
    return (cam.c2w @ p_cam)[:3]


def project(point, cam: CameraParams) -> tuple[float, float, float]:
    """Pixel coordinates and camera-space depth of a world point."""
    X, Y, Z = (cam.w2c @ np.append(np.asarray(point, dtype=np.float64), 1.0))[:3]
    if Z <= 1e-9:
        raise BehindCameraError(f"point has camera depth {Z}")
    return cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy, Z


def project_points(points: np.ndarray, cam: CameraParams):
    """Vectorised projection; returns (x, y, z) arrays without the behind-camera check."""
    p = np.asarray(points, dtype=np.float64)
    cam_p = p @ cam.w2c[:3, :3].T + cam.w2c[:3, 3]
    z = cam_p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = cam.fx * cam_p[..., 0] / z + cam.cx
        y = cam.fy * cam_p[..., 1] / z + cam.cy
    return x, y, z


@dataclass(frozen=True)
class GeoMatch:
    target_view: int
    x: float
    y: float
    z_cam: float
    valid: bool


def relative_transform(src: CameraParams, dst: CameraParams) -> np.ndarray:
    """3x4 map from ``src`` camera coordinates to ``dst`` camera coordinates."""
    return (dst.w2c @ src.c2w)[:3]


def match_pixels(xs, ys, source_view: int, target_view: int, batch,
                 tol_px: float = DEFAULT_TOL_PX, tol_depth: float = DEFAULT_TOL_DEPTH):
    """Vectorised ``geometric_match`` for arrays of source pixel coordinates.

    Returns (x, y, z_cam, valid) arrays.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if source_view == target_view:
        ds = batch.depth(source_view)
        h, w = ds.shape
        ix, iy = np.floor(xs + 0.5).astype(np.int64), np.floor(ys + 0.5).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        z = np.zeros_like(xs)
        z[inside] = ds[iy[inside], ix[inside]]
        return xs.copy(), ys.copy(), z, z > 0
    cs, ca = batch.cameras[source_view], batch.cameras[target_view]
    return _kernels.reproject(
        xs, ys,
        batch.depth(source_view), cs.intrinsics, ca.intrinsics,
        relative_transform(cs, ca), relative_transform(ca, cs),
        batch.depth(target_view), float(tol_px), float(tol_depth),
    )


def geometric_match(pixel, source_view: int, target_view: int, batch,
                    tol_px: float = DEFAULT_TOL_PX, tol_depth: float = DEFAULT_TOL_DEPTH) -> GeoMatch:
    """Transfer one source pixel into ``target_view`` and test it for occlusion.

    A match is valid when it lands inside the target image, the target depth
    agrees with the transferred depth within ``tol_depth`` (relative), and
    mapping back with the target depth returns within ``tol_px`` of the start.
    The same-view case returns the pixel itself, valid wherever depth is known.
    """
    x, y, z, ok = match_pixels([pixel[0]], [pixel[1]], source_view, target_view, batch, tol_px, tol_depth)
    return GeoMatch(target_view, float(x[0]), float(y[0]), float(z[0]), bool(ok[0]))
