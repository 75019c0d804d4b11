"""Single-head attention variants over feature grids.

Grids are arrays of shape (h, w, d); multi-view stacks are (N, h, w, d).
Projections act on token vectors as ``q = W_q @ f``, so a grid is projected
with ``f @ W_q.T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ShapeError
from .io import read_array, write_array


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float64) for m in (self.w_q, self.w_k, self.w_v)]
        d = mats[0].shape[0]
        for m in mats:
            if m.shape != (d, d):
                raise ShapeError(f"projection matrices must all be {d}x{d}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ShapeError("projection matrices must be finite")
        object.__setattr__(self, "w_q", mats[0])
        object.__setattr__(self, "w_k", mats[1])
        object.__setattr__(self, "w_v", mats[2])

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, scale: float = 0.1) -> "AttentionWeights":
        """Uniform in [-scale, scale]; the default matches the test convention."""
        return cls(*(rng.uniform(-scale, scale, size=(dim, dim)) for _ in range(3)))

    @classmethod
    def identity(cls, dim: int) -> "AttentionWeights":
        eye = np.eye(dim)
        return cls(eye, eye, eye)

    def save(self, prefix) -> None:
        """Write ``<prefix>_q.mvdt``, ``_k`` and ``_v`` as 2-D MVDT arrays."""
        for name, m in (("q", self.w_q), ("k", self.w_k), ("v", self.w_v)):
            write_array(m, f"{prefix}_{name}.mvdt")

    @classmethod
    def load(cls, prefix) -> "AttentionWeights":
        mats = []
        for name in "qkv":
            m = read_array(f"{prefix}_{name}.mvdt")
            if m.ndim != 2:
                raise ShapeError(f"{prefix}_{name}.mvdt is not a matrix")
            mats.append(m)
        return cls(*mats)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check(f, w, name="f"):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim < 3:
        raise ShapeError(f"{name} must be a (h, w, d) grid, got shape {f.shape}")
    if f.shape[-1] != w.dim:
        raise ShapeError(f"{name} has dim {f.shape[-1]}, weights have dim {w.dim}")
    return f


def attend(q_src: np.ndarray, kv_src: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with queries from one grid, keys/values from another.

    Leading axes beyond (h, w, d) are treated as independent batches.
    """
    d = w.dim
    qs = q_src.reshape(q_src.shape[:-3] + (-1, d))
    kvs = kv_src.reshape(kv_src.shape[:-3] + (-1, d))
    q = qs @ w.w_q.T
    k = kvs @ w.w_k.T
    v = kvs @ w.w_v.T
    att = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(d))
    return (att @ v).reshape(q_src.shape)


def self_attention(f: np.ndarray, w: AttentionWeights) -> np.ndarray:
    f = _check(f, w)
    return attend(f, f, w)


def reference_attention(f_i: np.ndarray, f_ref: np.ndarray, w: AttentionWeights, lam: float) -> np.ndarray:
    """Blend of attention against the reference grid and ordinary self-attention.

    ``lam`` weights the reference term; both terms scale logits by sqrt(d).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    f_i = _check(f_i, w, "f_i")
    f_ref = _check(f_ref, w, "f_ref")
    if f_ref.shape[-1] != f_i.shape[-1]:
        raise ShapeError("reference and query grids have different dims")
    own = attend(f_i, f_i, w)
    if lam == 0.0:
        return own
    return lam * attend(f_i, f_ref, w) + (1.0 - lam) * own


def cca(z: np.ndarray, cs, mask, w: AttentionWeights | None = None, reuse_projections: bool = True) -> np.ndarray:
    """Correspondence-constrained attention across a stack of N view grids.

    Every token attends only to its N correspondence entries, with masked
    entries pushed out by the additive bias. With ``reuse_projections`` the
    layer's W_q/W_k/W_v are applied; otherwise queries, keys and values are
    the raw features.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4:
        raise ShapeError(f"expected an (N, h, w, d) stack, got shape {z.shape}")
    n, h, gw, d = z.shape
    if (cs.n_views, cs.grid_h, cs.grid_w) != (n, h, gw):
        raise ShapeError(
            f"correspondence set is {(cs.n_views, cs.grid_h, cs.grid_w)}, features are {(n, h, gw)}"
        )
    bias = np.asarray(mask.bias, dtype=np.float64)
    if bias.shape != cs.tx.shape:
        raise ShapeError("attention mask is not aligned with the correspondence set")
    if reuse_projections:
        if w is None or w.dim != d:
            raise ShapeError("projection weights must match the feature dim")
        q, k, v = z @ w.w_q.T, z @ w.w_k.T, z @ w.w_v.T
    else:
        q = k = v = z
    return _kernels.gather_attention(q, k, v, cs.views(), cs.tx, cs.ty, bias, 1.0 / np.sqrt(d))
