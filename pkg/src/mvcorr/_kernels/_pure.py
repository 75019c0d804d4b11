"""Vectorised numpy implementations of the hot kernels.

These are the reference fallback for the compiled ``_native`` module and must
keep the exact same signatures and conventions.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def _nearest(v):
    return np.floor(v + 0.5).astype(np.int64)


def _transform(m, x, y, z):
    return (
        m[0, 0] * x + m[0, 1] * y + m[0, 2] * z + m[0, 3],
        m[1, 0] * x + m[1, 1] * y + m[1, 2] * z + m[1, 3],
        m[2, 0] * x + m[2, 1] * y + m[2, 2] * z + m[2, 3],
    )


def sample_depth(depth, xs, ys, tol_depth):
    """Source depth at continuous pixel positions.

    Requires a positive depth at the nearest pixel. Where the four surrounding
    pixels are all positive and agree within ``tol_depth`` (relative), inverse
    depth is interpolated bilinearly, which is exact for planar surfaces;
    otherwise the nearest-pixel depth is used. Returns 0 where unavailable.
    """
    h, w = depth.shape
    n = xs.shape[0]
    ix, iy = _nearest(xs), _nearest(ys)
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    d = np.zeros(n)
    d[ok] = depth[iy[ok], ix[ok]]
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    c = np.stack([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]])
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    lo, hi = c.min(axis=0), c.max(axis=0)
    smooth = ok & (d > 0) & (lo > 0) & (hi - lo <= tol_depth * lo)
    with np.errstate(divide="ignore"):
        interp = 1.0 / np.sum(wts / np.where(c > 0, c, 1.0), axis=0)
    return np.where(smooth, interp, d)


def reproject(xs, ys, depth_s, intr_s, intr_a, s2a, a2s, depth_a, tol_px, tol_depth):
    """Depth-based transfer of source pixels into a target view with occlusion tests.

    ``intr_*`` are (fx, fy, cx, cy); ``s2a``/``a2s`` are 3x4 camera-to-camera
    rigid transforms. Returns (xa, ya, za, valid); invalid rows hold NaN-free
    zeros in whatever stage failed.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n = xs.shape[0]
    ha, wa = depth_a.shape
    fxs, fys, cxs, cys = intr_s
    fxa, fya, cxa, cya = intr_a

    xa = np.zeros(n)
    ya = np.zeros(n)
    za = np.zeros(n)

    d = sample_depth(depth_s, xs, ys, tol_depth)
    ok = d > 0

    X = (xs - cxs) * d / fxs
    Y = (ys - cys) * d / fys
    px, py, pz = _transform(s2a, X, Y, d)
    ok &= pz > 1e-9
    safe = np.where(ok, pz, 1.0)
    u = fxa * px / safe + cxa
    v = fya * py / safe + cya
    xa[ok], ya[ok], za[ok] = u[ok], v[ok], pz[ok]
    ok &= (u >= 0) & (u < wa) & (v >= 0) & (v < ha)

    jx = np.minimum(np.where(ok, _nearest(u), 0), wa - 1)
    jy = np.minimum(np.where(ok, _nearest(v), 0), ha - 1)
    da = np.where(ok, depth_a[jy, jx], 0.0)
    ok &= da > 0
    ok &= np.abs(da - pz) <= tol_depth * np.where(ok, pz, 1.0)

    bx = (u - cxa) * da / fxa
    by = (v - cya) * da / fya
    qx, qy, qz = _transform(a2s, bx, by, da)
    ok &= qz > 1e-9
    safe = np.where(ok, qz, 1.0)
    rx = fxs * qx / safe + cxs
    ry = fys * qy / safe + cys
    ok &= (rx - xs) ** 2 + (ry - ys) ** 2 <= tol_px * tol_px
    return xa, ya, za, ok


def cosine_argmax(query, target, chunk=1024):
    """Row-wise argmax of cosine similarity; zero vectors score 0 against everything.

    Ties resolve to the lowest target row.
    """
    q = np.asarray(query, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1)
    tn = np.linalg.norm(t, axis=1)
    qh = np.divide(q, qn[:, None], out=np.zeros_like(q), where=qn[:, None] > 0)
    th = np.divide(t, tn[:, None], out=np.zeros_like(t), where=tn[:, None] > 0)
    idx = np.zeros(q.shape[0], dtype=np.int64)
    score = np.zeros(q.shape[0])
    if t.shape[0] == 0:
        idx[:] = -1
        score[:] = -np.inf
        return idx, score
    for lo in range(0, q.shape[0], chunk):
        sims = qh[lo : lo + chunk] @ th.T
        best = np.argmax(sims, axis=1)
        idx[lo : lo + chunk] = best
        score[lo : lo + chunk] = sims[np.arange(best.shape[0]), best]
    return idx, score


def gather_attention(q, k, v, views, tx, ty, bias, scale):
    """Per-token attention over an explicit key list.

    q, k, v: (V, H, W, d). views/tx/ty/bias: (V, H, W, N) naming, for each
    query token, the N (view, x, y) key positions and their additive bias.
    """
    keys = k[views, ty, tx]  # (V, H, W, N, d)
    vals = v[views, ty, tx]
    logits = np.einsum("vhwd,vhwnd->vhwn", q, keys) * scale + bias
    logits -= logits.max(axis=-1, keepdims=True)
    wts = np.exp(logits)
    wts /= wts.sum(axis=-1, keepdims=True)
    return np.einsum("vhwn,vhwnd->vhwd", wts, vals)
