"""Geometry-plus-semantics correspondence sets and their attention masks.

For every source token each of the N views gets exactly one entry: the token
itself for its own view, a depth-based geometric match where one survives the
occlusion tests, and otherwise the most cosine-similar token of the target
view's semantic features, kept valid only above ``beta``.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import FormatError, ShapeError, TruncationError
from .geometry import DEFAULT_TOL_DEPTH, match_pixels
from .io import check_grid

GEOMETRIC, SEMANTIC, SELF = 0, 1, 2
KIND_NAMES = {GEOMETRIC: "geometric", SEMANTIC: "semantic", SELF: "self"}
DEFAULT_BETA = 0.9
DEFAULT_PATCH = 8
DEFAULT_TOL_TOKENS = 1.0
MASKED = -1e9


def worker_count() -> int:
    env = os.environ.get("MVCORR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(eq=False)
class CorrespondenceSet:
    """Per (source view, y, x) token, one entry per target view.

    All arrays have shape (N, grid_h, grid_w, N); the last axis is the target
    view. ``score`` carries the cosine similarity for semantic entries, 1 for
    self entries and 0 for geometric ones.
    """

    tx: np.ndarray
    ty: np.ndarray
    valid: np.ndarray
    kind: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        self.tx = np.asarray(self.tx, dtype=np.int64)
        self.ty = np.asarray(self.ty, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.kind = np.asarray(self.kind, dtype=np.uint8)
        self.score = np.asarray(self.score, dtype=np.float32)
        shape = self.tx.shape
        if len(shape) != 4 or shape[0] != shape[3]:
            raise ShapeError(f"correspondence arrays must be (N, h, w, N), got {shape}")
        for name in ("ty", "valid", "kind", "score"):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_views(self) -> int:
        return self.tx.shape[0]

    @property
    def grid_h(self) -> int:
        return self.tx.shape[1]

    @property
    def grid_w(self) -> int:
        return self.tx.shape[2]

    def views(self) -> np.ndarray:
        """Target view index per entry, broadcast to the full array shape."""
        return np.broadcast_to(np.arange(self.n_views, dtype=np.int64), self.tx.shape)

    def counts(self) -> dict:
        """Number of entries per category, self entries included."""
        geo = self.kind == GEOMETRIC
        sem = self.kind == SEMANTIC
        return {
            "self": int(np.sum(self.kind == SELF)),
            "geometric": int(np.sum(geo & self.valid)),
            "semantic": int(np.sum(sem & self.valid)),
            "invalid": int(np.sum(~self.valid)),
        }

    def __eq__(self, other):
        if not isinstance(other, CorrespondenceSet):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("tx", "ty", "valid", "kind", "score")
        )

    __hash__ = None


@dataclass(eq=False)
class AttentionMask:
    """Additive attention bias per correspondence entry: 0 valid, -1e9 masked."""

    bias: np.ndarray

    @classmethod
    def from_correspondences(cls, cs: CorrespondenceSet) -> "AttentionMask":
        return cls(np.where(cs.valid, 0.0, MASKED))


def _normalise_token(source, token):
    x, y = token
    h, w, _ = source.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ShapeError(f"token {token} outside a {w}x{h} grid")
    return int(x), int(y)


def semantic_match(source: np.ndarray, token, target: np.ndarray, beta: float = DEFAULT_BETA):
    """Most cosine-similar target token to ``source[token]``.

    Returns ``(tx, ty, score)`` when the best score exceeds ``beta``, else
    None. Ties go to the lowest row-major target index.
    """
    source = check_grid(source, "source")
    target = check_grid(target, "target")
    if source.shape[2] != target.shape[2]:
        raise ShapeError(f"feature dims differ: {source.shape[2]} vs {target.shape[2]}")
    x, y = _normalise_token(source, token)
    idx, score = _kernels.cosine_argmax(source[y, x][None, :], target.reshape(-1, target.shape[2]))
    if not score[0] > beta:
        return None
    ty, tx = divmod(int(idx[0]), target.shape[1])
    return tx, ty, float(score[0])


def token_centers(grid_w: int, grid_h: int, patch: int):
    """Image pixel coordinates of every token centre, as two (grid_h, grid_w) arrays."""
    xs = (np.arange(grid_w) + 0.5) * patch - 0.5
    ys = (np.arange(grid_h) + 0.5) * patch - 0.5
    return np.meshgrid(xs, ys)


def pixel_to_token(v, patch: int, n: int):
    """Nearest token index for continuous pixel coordinates, clamped to the grid."""
    return np.clip(np.floor((np.asarray(v) + 0.5) / patch), 0, n - 1).astype(np.int64)


def build_correspondences(batch, features, patch: int = DEFAULT_PATCH, beta: float = DEFAULT_BETA,
                          tol_px: float = DEFAULT_TOL_TOKENS, tol_depth: float = DEFAULT_TOL_DEPTH,
                          threads: int | None = None):
    """Build the correspondence set and its attention mask for a batch.

    ``tol_px`` is expressed in latent tokens and scaled by ``patch`` before the
    pixel-level round-trip test.
    """
    n = batch.n_views
    if len(features) != n:
        raise ShapeError(f"got {len(features)} feature grids for {n} views")
    gh = math.ceil(batch.height / patch) if n else 0
    gw = math.ceil(batch.width / patch) if n else 0
    feats = [check_grid(f, f"features[{i}]") for i, f in enumerate(features)]
    for i, f in enumerate(feats):
        if f.shape[:2] != (gh, gw):
            raise ShapeError(f"features[{i}] is {f.shape[:2]}, latent grid is {(gh, gw)}")
        if f.shape[2] != feats[0].shape[2]:
            raise ShapeError("feature dims differ between views")

    shape = (n, gh, gw, n)
    tx = np.zeros(shape, dtype=np.int64)
    ty = np.zeros(shape, dtype=np.int64)
    valid = np.zeros(shape, dtype=bool)
    kind = np.full(shape, SEMANTIC, dtype=np.uint8)
    score = np.zeros(shape, dtype=np.float32)
    if n == 0:
        return CorrespondenceSet(tx, ty, valid, kind, score), AttentionMask(np.zeros(shape))

    cx, cy = token_centers(gw, gh, patch)
    gx, gy = np.meshgrid(np.arange(gw), np.arange(gh))
    flat = [f.reshape(-1, f.shape[2]) for f in feats]

    def pair(s, a):
        x, y, _, ok = match_pixels(cx, cy, s, a, batch, tol_px * patch, tol_depth)
        ok = ok.reshape(gh, gw)
        ptx = np.where(ok, pixel_to_token(x, patch, gw).reshape(gh, gw), 0)
        pty = np.where(ok, pixel_to_token(y, patch, gh).reshape(gh, gw), 0)
        miss = np.flatnonzero(~ok.reshape(-1))
        idx, sim = _kernels.cosine_argmax(flat[s][miss], flat[a])
        return s, a, ok, ptx, pty, miss, idx, sim

    jobs = [(s, a) for s in range(n) for a in range(n) if a != s]
    workers = threads or worker_count()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: pair(*j), jobs))
    else:
        results = [pair(*j) for j in jobs]

    for s, a, ok, ptx, pty, miss, idx, sim in results:
        tx[s, :, :, a] = ptx
        ty[s, :, :, a] = pty
        valid[s, :, :, a] = ok
        kind[s, :, :, a] = np.where(ok, GEOMETRIC, SEMANTIC)
        my, mx = np.divmod(miss, gw)
        sy, sx = np.divmod(idx, gw)
        tx[s, my, mx, a] = sx
        ty[s, my, mx, a] = sy
        score[s, my, mx, a] = sim
        valid[s, my, mx, a] = score[s, my, mx, a] > beta

    for s in range(n):
        tx[s, :, :, s] = gx
        ty[s, :, :, s] = gy
        valid[s, :, :, s] = True
        kind[s, :, :, s] = SELF
        score[s, :, :, s] = 1.0

    cs = CorrespondenceSet(tx, ty, valid, kind, score)
    return cs, AttentionMask.from_correspondences(cs)


def rethreshold(cs: CorrespondenceSet, beta: float) -> CorrespondenceSet:
    """Same set with semantic validity recomputed for a different ``beta``."""
    sem = cs.kind == SEMANTIC
    valid = np.where(sem, cs.score > beta, cs.valid)
    return CorrespondenceSet(cs.tx, cs.ty, valid, cs.kind, cs.score)


# --- MVCR file format ------------------------------------------------------------

MVCR_MAGIC = b"MVCR"
MVCR_VERSION = 1
_MVCR_HEAD = struct.Struct("<4sIIII")
_ENTRY = np.dtype([("view", "<u2"), ("tx", "<u2"), ("ty", "<u2"), ("valid", "u1"), ("kind", "u1"), ("score", "<f4")])


def _record_dtype(n):
    return np.dtype([("sv", "<u2"), ("sx", "<u2"), ("sy", "<u2"), ("e", _ENTRY, (n,))])


def encode_correspondences(cs: CorrespondenceSet) -> bytes:
    n, gh, gw = cs.n_views, cs.grid_h, cs.grid_w
    rec = np.zeros(n * gh * gw, dtype=_record_dtype(n))
    sv, sy, sx = np.meshgrid(np.arange(n), np.arange(gh), np.arange(gw), indexing="ij")
    rec["sv"], rec["sy"], rec["sx"] = sv.reshape(-1), sy.reshape(-1), sx.reshape(-1)
    e = rec["e"]
    flat = (n * gh * gw, n)
    e["view"] = cs.views().reshape(flat)
    e["tx"] = cs.tx.reshape(flat)
    e["ty"] = cs.ty.reshape(flat)
    e["valid"] = cs.valid.reshape(flat)
    e["kind"] = cs.kind.reshape(flat)
    e["score"] = cs.score.reshape(flat)
    return _MVCR_HEAD.pack(MVCR_MAGIC, MVCR_VERSION, n, gw, gh) + rec.tobytes()


def decode_correspondences(buf: bytes) -> CorrespondenceSet:
    if len(buf) < _MVCR_HEAD.size:
        raise TruncationError("file shorter than MVCR header")
    magic, version, n, gw, gh = _MVCR_HEAD.unpack_from(buf, 0)
    if magic != MVCR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MVCR_MAGIC!r}")
    if version != MVCR_VERSION:
        raise FormatError(f"unsupported MVCR version {version}")
    dt = _record_dtype(n)
    count = n * gh * gw
    body = len(buf) - _MVCR_HEAD.size
    if body != count * dt.itemsize:
        raise TruncationError(f"MVCR body has {body} bytes, expected {count * dt.itemsize}")
    rec = np.frombuffer(buf, dtype=dt, offset=_MVCR_HEAD.size, count=count)
    sv, sy, sx = np.meshgrid(np.arange(n), np.arange(gh), np.arange(gw), indexing="ij")
    if not (np.array_equal(rec["sv"], sv.reshape(-1)) and np.array_equal(rec["sy"], sy.reshape(-1))
            and np.array_equal(rec["sx"], sx.reshape(-1))):
        raise FormatError("MVCR records are not in (view, y, x) order")
    e = rec["e"]
    if not np.array_equal(e["view"], np.broadcast_to(np.arange(n), (count, n))):
        raise FormatError("MVCR entries must list target views in order")
    if np.any(e["kind"] > SELF) or np.any(e["valid"] > 1):
        raise FormatError("MVCR entry has an unknown kind or validity flag")
    shape = (n, gh, gw, n)
    return CorrespondenceSet(
        e["tx"].reshape(shape), e["ty"].reshape(shape), e["valid"].reshape(shape).astype(bool),
        e["kind"].reshape(shape), e["score"].reshape(shape),
    )


def serialize_correspondences(cs: CorrespondenceSet, path) -> None:
    Path(path).write_bytes(encode_correspondences(cs))


def deserialize_correspondences(path) -> CorrespondenceSet:
    return decode_correspondences(Path(path).read_bytes())
