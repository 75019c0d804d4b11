# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for reprojection and gathered attention.

Signatures and conventions mirror ``_pure``; both backends are tested for
agreement.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, exp, fabs, INFINITY

cnp.import_array()

NAME = "native"


cdef inline long _nearest(double v) nogil:
    return <long>floor(v + 0.5)


cdef inline double _sample_depth(double[:, ::1] ds, double x, double y, double tol_depth) nogil:
    cdef long hs = ds.shape[0], ws = ds.shape[1]
    cdef long ix = _nearest(x), iy = _nearest(y)
    cdef long x0, y0, x1, y1
    cdef double d, fx, fy, c00, c01, c10, c11, lo, hi
    if ix < 0 or ix >= ws or iy < 0 or iy >= hs:
        return 0.0
    d = ds[iy, ix]
    if d <= 0:
        return 0.0
    x0 = <long>floor(x)
    y0 = <long>floor(y)
    x0 = 0 if x0 < 0 else (ws - 1 if x0 > ws - 1 else x0)
    y0 = 0 if y0 < 0 else (hs - 1 if y0 > hs - 1 else y0)
    x1 = x0 + 1 if x0 + 1 < ws else ws - 1
    y1 = y0 + 1 if y0 + 1 < hs else hs - 1
    fx = x - x0
    fy = y - y0
    fx = 0.0 if fx < 0 else (1.0 if fx > 1 else fx)
    fy = 0.0 if fy < 0 else (1.0 if fy > 1 else fy)
    c00 = ds[y0, x0]
    c01 = ds[y0, x1]
    c10 = ds[y1, x0]
    c11 = ds[y1, x1]
    lo = min(min(c00, c01), min(c10, c11))
    hi = max(max(c00, c01), max(c10, c11))
    if lo <= 0 or hi - lo > tol_depth * lo:
        return d
    return 1.0 / ((1 - fx) * (1 - fy) / c00 + fx * (1 - fy) / c01 + (1 - fx) * fy / c10 + fx * fy / c11)


def reproject(xs, ys, depth_s, intr_s, intr_a, s2a, a2s, depth_a, double tol_px, double tol_depth):
    cdef double[::1] cx_s = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] cy_s = np.ascontiguousarray(ys, dtype=np.float64)
    cdef double[:, ::1] ds = np.ascontiguousarray(depth_s, dtype=np.float64)
    cdef double[:, ::1] da = np.ascontiguousarray(depth_a, dtype=np.float64)
    cdef double[:, ::1] m = np.ascontiguousarray(s2a, dtype=np.float64)
    cdef double[:, ::1] r = np.ascontiguousarray(a2s, dtype=np.float64)
    cdef double fxs = intr_s[0], fys = intr_s[1], cxs = intr_s[2], cys = intr_s[3]
    cdef double fxa = intr_a[0], fya = intr_a[1], cxa = intr_a[2], cya = intr_a[3]
    cdef Py_ssize_t n = cx_s.shape[0]
    cdef long ha = da.shape[0], wa = da.shape[1]

    out_x = np.zeros(n)
    out_y = np.zeros(n)
    out_z = np.zeros(n)
    out_ok = np.zeros(n, dtype=bool)
    cdef double[::1] ox = out_x, oy = out_y, oz = out_z
    cdef cnp.npy_bool[::1] ok = out_ok

    cdef Py_ssize_t i
    cdef long jx, jy
    cdef double x, y, d, X, Y, px, py, pz, u, v, dep, bx, by, qx, qy, qz, rx, ry
    with nogil:
        for i in range(n):
            x = cx_s[i]
            y = cy_s[i]
            d = _sample_depth(ds, x, y, tol_depth)
            if d <= 0:
                continue
            X = (x - cxs) * d / fxs
            Y = (y - cys) * d / fys
            px = m[0, 0] * X + m[0, 1] * Y + m[0, 2] * d + m[0, 3]
            py = m[1, 0] * X + m[1, 1] * Y + m[1, 2] * d + m[1, 3]
            pz = m[2, 0] * X + m[2, 1] * Y + m[2, 2] * d + m[2, 3]
            if pz <= 1e-9:
                continue
            u = fxa * px / pz + cxa
            v = fya * py / pz + cya
            ox[i] = u
            oy[i] = v
            oz[i] = pz
            if u < 0 or u >= wa or v < 0 or v >= ha:
                continue
            jx = _nearest(u)
            jy = _nearest(v)
            if jx > wa - 1:
                jx = wa - 1
            if jy > ha - 1:
                jy = ha - 1
            dep = da[jy, jx]
            if dep <= 0 or fabs(dep - pz) > tol_depth * pz:
                continue
            bx = (u - cxa) * dep / fxa
            by = (v - cya) * dep / fya
            qx = r[0, 0] * bx + r[0, 1] * by + r[0, 2] * dep + r[0, 3]
            qy = r[1, 0] * bx + r[1, 1] * by + r[1, 2] * dep + r[1, 3]
            qz = r[2, 0] * bx + r[2, 1] * by + r[2, 2] * dep + r[2, 3]
            if qz <= 1e-9:
                continue
            rx = fxs * qx / qz + cxs
            ry = fys * qy / qz + cys
            if (rx - x) * (rx - x) + (ry - y) * (ry - y) <= tol_px * tol_px:
                ok[i] = True
    return out_x, out_y, out_z, out_ok


# The cosine search is a dense matrix product, where BLAS beats hand-written
# loops by a wide margin, so both backends share the numpy implementation.
from ._pure import cosine_argmax


def gather_attention(q, k, v, views, tx, ty, bias, double scale):
    cdef double[:, :, :, ::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, :, :, ::1] K = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, :, :, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef cnp.int64_t[:, :, :, ::1] VI = np.ascontiguousarray(views, dtype=np.int64)
    cdef cnp.int64_t[:, :, :, ::1] TX = np.ascontiguousarray(tx, dtype=np.int64)
    cdef cnp.int64_t[:, :, :, ::1] TY = np.ascontiguousarray(ty, dtype=np.int64)
    cdef double[:, :, :, ::1] B = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t nv = Q.shape[0], h = Q.shape[1], w = Q.shape[2], dim = Q.shape[3]
    cdef Py_ssize_t ne = VI.shape[3]
    out_arr = np.zeros((nv, h, w, dim))
    logit_arr = np.zeros(max(ne, 1))
    cdef double[:, :, :, ::1] O = out_arr
    cdef double[::1] lg = logit_arr
    cdef Py_ssize_t a, y, x, e, c
    cdef cnp.int64_t kv, ky, kx
    cdef double acc, mx, tot, wt
    with nogil:
        for a in range(nv):
            for y in range(h):
                for x in range(w):
                    mx = -INFINITY
                    for e in range(ne):
                        kv = VI[a, y, x, e]
                        ky = TY[a, y, x, e]
                        kx = TX[a, y, x, e]
                        acc = 0
                        for c in range(dim):
                            acc = acc + Q[a, y, x, c] * K[kv, ky, kx, c]
                        lg[e] = acc * scale + B[a, y, x, e]
                        if lg[e] > mx:
                            mx = lg[e]
                    tot = 0
                    for e in range(ne):
                        lg[e] = exp(lg[e] - mx)
                        tot = tot + lg[e]
                    for e in range(ne):
                        wt = lg[e] / tot
                        if wt == 0:
                            continue
                        kv = VI[a, y, x, e]
                        ky = TY[a, y, x, e]
                        kx = TX[a, y, x, e]
                        for c in range(dim):
                            O[a, y, x, c] += wt * V[kv, ky, kx, c]
    return out_arr
