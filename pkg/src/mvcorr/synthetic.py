"""Analytic multi-view test scenes with exact depth and correspondence oracles.

Every scene is built from a few ray-traceable primitives (the plane z=0, a
sphere, axis-aligned boxes). Cameras sit on an arc in the x-z plane looking
at the origin. Depth maps, feature grids and oracle tables are all computed
by exact ray casting, so they serve as ground truth for the geometry and
correspondence code.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import SpecError
from .geometry import CameraParams, look_at, project_points
from .io import MultiViewBatch, Raster, read_array, read_cameras, read_grid, read_raster, write_array, write_cameras, write_grid, write_raster

KINDS = ("plane", "sphere", "plane_with_occluder", "mirrored_texture")


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "plane"
    n_views: int = 4
    size: int = 128
    seed: int = 0
    patch: int = 8
    dim: int = 16
    span_deg: float = 60.0
    radius: float = 4.0
    noise: float = 0.0

    def validate(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown scene kind {self.kind!r}; choose from {KINDS}")
        if self.n_views < 1:
            raise SpecError("a scene needs at least one view")
        if self.patch < 1 or self.size < self.patch or self.size % self.patch:
            raise SpecError(f"image size {self.size} must be a positive multiple of patch {self.patch}")
        if self.dim < 1:
            raise SpecError("feature dimension must be positive")
        if not self.radius > 1.5:
            raise SpecError("camera radius must clear the scene primitives")
        if self.noise < 0:
            raise SpecError("noise must be non-negative")


# --- primitives ----------------------------------------------------------------
# Each intersect() takes ray origins/directions of shape (..., 3) and returns the
# ray parameter of the first hit in front of the origin (inf where missed).

class Plane:
    """The plane z = 0."""

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[..., 2] / d[..., 2]
        return np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)


class Sphere:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def intersect(self, o, d):
        oc = o - self.center
        a = np.sum(d * d, axis=-1)
        b = 2 * np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0))
        t0 = (-b - root) / (2 * a)
        t1 = (-b + root) / (2 * a)
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)


class Box:
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.lo - o) * inv
            tb = (self.hi - o) * inv
        ta = np.where(np.isnan(ta), -np.inf, ta)
        tb = np.where(np.isnan(tb), np.inf, tb)
        tnear = np.max(np.minimum(ta, tb), axis=-1)
        tfar = np.min(np.maximum(ta, tb), axis=-1)
        hit = (tnear <= tfar) & (tfar > 1e-9)
        t = np.where(tnear > 1e-9, tnear, tfar)
        return np.where(hit, t, np.inf)


class FeatureField:
    """Smooth seeded random field R^3 -> R^dim built from random Fourier features."""

    def __init__(self, rng, dim, length_scale=0.5, mirror_x=False):
        self.freq = rng.normal(0.0, 1.0 / length_scale, size=(3, dim))
        self.phase = rng.uniform(0, 2 * np.pi, size=dim)
        self.mirror_x = mirror_x

    def __call__(self, pts):
        p = np.array(pts, dtype=np.float64)
        if self.mirror_x:
            p[..., 0] = np.abs(p[..., 0])
        return np.sqrt(2.0) * np.cos(p @ self.freq + self.phase)


def _primitives(kind):
    if kind == "plane":
        return [Plane()]
    if kind == "sphere":
        return [Sphere((0, 0, 0), 1.0)]
    if kind == "plane_with_occluder":
        return [Plane(), Box((-0.05, -0.15, 1.15), (0.65, 0.55, 1.25))]
    # mirrored_texture: the slab hides part of the x<0 half from the
    # positive-angle cameras while its mirror image stays visible.
    return [Plane(), Box((-0.13, -0.6, 0.95), (0.44, 0.6, 1.05))]


def arc_cameras(spec: SceneSpec) -> list[CameraParams]:
    if spec.n_views == 1:
        angles = np.zeros(1)
    elif spec.span_deg >= 360:
        angles = np.linspace(-np.pi, np.pi, spec.n_views, endpoint=False)
    else:
        half = np.deg2rad(spec.span_deg) / 2
        angles = np.linspace(-half, half, spec.n_views)
    focal = 0.9 * spec.size
    c = (spec.size - 1) / 2.0
    cams = []
    for a in angles:
        eye = spec.radius * np.array([np.sin(a), 0.0, np.cos(a)])
        cams.append(CameraParams(focal, focal, c, c, look_at(eye, (0, 0, 0)), spec.size, spec.size))
    return cams


class Scene:
    """A generated scene: batch, latent feature grids and analytic oracles."""

    def __init__(self, spec: SceneSpec):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.cameras = arc_cameras(spec)
        self.primitives = _primitives(spec.kind)
        self.fields = [FeatureField(rng, spec.dim, mirror_x=spec.kind == "mirrored_texture")]
        self.fields += [FeatureField(rng, spec.dim) for _ in self.primitives[1:]]
        self._noise_rng = np.random.default_rng([spec.seed, 1])

        n, s = spec.n_views, spec.size
        px = np.arange(s, dtype=np.float64)
        self.pixel_xy = np.meshgrid(px, px)
        g = s // spec.patch
        tc = (np.arange(g) + 0.5) * spec.patch - 0.5
        self.token_xy = np.meshgrid(tc, tc)

        images, depths = [], []
        self.features = []
        for v in range(n):
            t, prim, pts = self.cast(v, *self.pixel_xy)
            depth = np.where(np.isfinite(t), t, 0.0)
            feats = self.shade(prim, pts)
            rgb = np.where(np.isfinite(t)[..., None], 0.5 + 0.5 * np.tanh(feats[..., :3]), 0.0)
            if rgb.shape[-1] < 3:
                rgb = np.concatenate([rgb, np.zeros(rgb.shape[:-1] + (3 - rgb.shape[-1],))], axis=-1)
            images.append(Raster(rgb.astype(np.float32)))
            depths.append(Raster(depth.astype(np.float32)))
            tt, tprim, tpts = self.cast(v, *self.token_xy)
            grid = self.shade(tprim, tpts)
            if spec.noise > 0:
                grid = grid + self._noise_rng.normal(0.0, spec.noise, size=grid.shape)
            self.features.append(grid.astype(np.float32))
        self.batch = MultiViewBatch(images, depths, self.cameras)
        self._oracles = None

    # ray casting -----------------------------------------------------------
    def rays(self, view, xs, ys):
        cam = self.cameras[view]
        dirs_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1)
        c2w = cam.c2w
        dirs = dirs_cam @ c2w[:3, :3].T
        origins = np.broadcast_to(c2w[:3, 3], dirs.shape)
        return origins, dirs

    def first_hit(self, origins, dirs):
        ts = np.stack([p.intersect(origins, dirs) for p in self.primitives])
        prim = np.argmin(ts, axis=0)
        t = np.take_along_axis(ts, prim[None], axis=0)[0]
        prim = np.where(np.isfinite(t), prim, -1)
        return t, prim

    def cast(self, view, xs, ys):
        """Camera depth, primitive id (-1 for a miss) and world hit point per pixel.

        Rays have unit camera-space z, so the ray parameter is the z-depth.
        """
        o, d = self.rays(view, np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
        t, prim = self.first_hit(o, d)
        pts = o + d * np.where(np.isfinite(t), t, 0.0)[..., None]
        return t, prim, pts

    def shade(self, prim, pts):
        out = np.zeros(prim.shape + (self.spec.dim,))
        for k, field in enumerate(self.fields):
            sel = prim == k
            if np.any(sel):
                out[sel] = field(pts[sel])
        return out

    def visible_from(self, view, pts):
        """Whether world points are unobstructed and in front of camera ``view``."""
        cam = self.cameras[view]
        center = cam.center
        d = pts - center
        t, _ = self.first_hit(np.broadcast_to(center, d.shape), d)
        _, _, z = project_points(pts, cam)
        return (z > 1e-9) & (t >= 1.0 - 1e-6)

    # oracles ---------------------------------------------------------------
    def transfer(self, source, target, xs, ys):
        """Exact transfer of source pixels into ``target``.

        Returns (x, y, visible); visible requires a surface hit, an in-bounds
        target projection and an unobstructed line of sight from the target.
        """
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        t, prim, pts = self.cast(source, xs, ys)
        hit = prim >= 0
        if source == target:
            return xs.copy(), ys.copy(), hit
        cam = self.cameras[target]
        x, y, z = project_points(pts, cam)
        inside = (x >= 0) & (x < cam.width) & (y >= 0) & (y < cam.height)
        vis = hit & inside & self.visible_from(target, pts)
        x = np.where(hit & (z > 1e-9), x, 0.0)
        y = np.where(hit & (z > 1e-9), y, 0.0)
        return x, y, vis

    def oracle(self, view):
        """(H, W, N, 3) table of exact (x, y, visible) for every pixel and target view."""
        if self._oracles is None:
            self._oracles = [None] * self.spec.n_views
        if self._oracles[view] is None:
            n = self.spec.n_views
            table = np.zeros((self.spec.size, self.spec.size, n, 3))
            for b in range(n):
                x, y, vis = self.transfer(view, b, *self.pixel_xy)
                table[:, :, b, 0] = x
                table[:, :, b, 1] = y
                table[:, :, b, 2] = vis
            self._oracles[view] = table
        return self._oracles[view]

    # persistence -----------------------------------------------------------
    def save(self, directory):
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_cameras(self.cameras, out / "cameras.txt")
        for v in range(self.spec.n_views):
            write_raster(self.batch.images[v], out / f"view_{v:03d}.mvdt")
            write_raster(self.batch.depths[v], out / f"depth_{v:03d}.mvdt")
            write_grid(self.features[v], out / f"feat_{v:03d}.mvdt")
            write_array(self.oracle(v), out / f"oracle_{v:03d}.mvdt")
        (out / "scene.json").write_text(json.dumps(asdict(self.spec), sort_keys=True) + "\n")


def generate(spec: SceneSpec) -> Scene:
    return Scene(spec)


@dataclass
class LoadedScene:
    spec: SceneSpec | None
    batch: MultiViewBatch
    features: list
    directory: Path

    def oracle(self, view):
        return read_array(self.directory / f"oracle_{view:03d}.mvdt")


def load_scene(directory) -> LoadedScene:
    """Read a scene directory written by :meth:`Scene.save`."""
    d = Path(directory)
    cams = read_cameras(d / "cameras.txt")
    n = len(cams)
    images = [read_raster(d / f"view_{v:03d}.mvdt") for v in range(n)]
    depths = [read_raster(d / f"depth_{v:03d}.mvdt") for v in range(n)]
    feats = [read_grid(d / f"feat_{v:03d}.mvdt") for v in range(n)]
    meta = d / "scene.json"
    spec = SceneSpec(**json.loads(meta.read_text())) if meta.exists() else None
    return LoadedScene(spec, MultiViewBatch(images, depths, cams), feats, d)
