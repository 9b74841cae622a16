# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def fd_advance(u, double h, c2, c1):
    cdef const double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef const double[:, ::1] a2 = np.ascontiguousarray(c2, dtype=np.float64)
    cdef const double[:, ::1] a1 = np.ascontiguousarray(c1, dtype=np.float64)
    cdef Py_ssize_t r = uv.shape[0], m = uv.shape[1], i, j
    out = np.empty((r, m))
    cdef double[:, ::1] ov = out
    cdef double hh = h * h, d1, d2, d2_lo, d2_hi
    for i in range(r):
        for j in range(1, m - 1):
            d1 = (uv[i, j + 1] - uv[i, j - 1]) / (2.0 * h)
            d2 = (uv[i, j + 1] - 2.0 * uv[i, j] + uv[i, j - 1]) / hh
            ov[i, j] = uv[i, j] + a2[i, j] * d2 + a1[i, j] * d1
        d2_lo = (uv[i, 2] - 2.0 * uv[i, 1] + uv[i, 0]) / hh
        d2_hi = (uv[i, m - 1] - 2.0 * uv[i, m - 2] + uv[i, m - 3]) / hh
        d1 = (uv[i, 1] - uv[i, 0]) / h
        ov[i, 0] = uv[i, 0] + a2[i, 0] * d2_lo + a1[i, 0] * d1
        d1 = (uv[i, m - 1] - uv[i, m - 2]) / h
        ov[i, m - 1] = uv[i, m - 1] + a2[i, m - 1] * d2_hi + a1[i, m - 1] * d1
    return out


def uniform_interp(values, double x0, double h, queries):
    cdef const double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef Py_ssize_t r = q.shape[0], nq = q.shape[1], m = v.shape[1], i, j, idx
    out = np.empty((r, nq))
    flags = np.zeros((r, nq), dtype=np.uint8)
    cdef double[:, ::1] ov = out
    cdef unsigned char[:, ::1] fv = flags
    cdef double s, w, lo
    for i in range(r):
        for j in range(nq):
            s = (q[i, j] - x0) / h
            if s < 0.0 or s > m - 1:
                fv[i, j] = 1
            idx = <Py_ssize_t>floor(s)
            if idx < 0:
                idx = 0
            elif idx > m - 2:
                idx = m - 2
            w = s - idx
            lo = v[i, idx]
            ov[i, j] = lo + w * (v[i, idx + 1] - lo)
    return out, flags.view(bool)


def interp_rows(xp, fp, xq):
    cdef const double[:, ::1] xv = np.ascontiguousarray(xp, dtype=np.float64)
    cdef const double[:, ::1] fv = np.ascontiguousarray(np.broadcast_to(fp, np.shape(xp)), dtype=np.float64)
    cdef const double[:, ::1] qv = np.ascontiguousarray(xq, dtype=np.float64)
    cdef Py_ssize_t r = xv.shape[0], m = xv.shape[1], nq = qv.shape[1]
    cdef Py_ssize_t i, j, lo, hi, mid
    out = np.empty((r, nq))
    flags = np.zeros((r, nq), dtype=np.uint8)
    cdef double[:, ::1] ov = out
    cdef unsigned char[:, ::1] gv = flags
    cdef double x, w, f_lo
    for i in range(r):
        for j in range(nq):
            x = qv[i, j]
            if x < xv[i, 0] or x > xv[i, m - 1]:
                gv[i, j] = 1
            # last index with xp <= x, clipped to a valid segment
            lo = 0
            hi = m - 1
            if x >= xv[i, m - 1]:
                lo = m - 2
            elif x < xv[i, 0]:
                lo = 0
            else:
                while hi - lo > 1:
                    mid = (lo + hi) >> 1
                    if xv[i, mid] <= x:
                        lo = mid
                    else:
                        hi = mid
                if lo > m - 2:
                    lo = m - 2
            w = (x - xv[i, lo]) / (xv[i, lo + 1] - xv[i, lo])
            f_lo = fv[i, lo]
            ov[i, j] = f_lo + w * (fv[i, lo + 1] - f_lo)
    return out, flags.view(bool)


def linear_sde_paths(c0, drift, diff, jumps, dt, dW, marks):
    cdef const double[:, ::1] c_init = np.ascontiguousarray(c0, dtype=np.float64)
    cdef const double[:, ::1] dm = np.ascontiguousarray(drift, dtype=np.float64)
    cdef const double[:, :, ::1] bm = np.ascontiguousarray(diff, dtype=np.float64)
    cdef const double[:, :, ::1] jm = np.ascontiguousarray(jumps, dtype=np.float64)
    cdef const double[:, ::1] dtv = np.ascontiguousarray(dt, dtype=np.float64)
    cdef const double[:, :, ::1] dwv = np.ascontiguousarray(dW, dtype=np.float64)
    cdef const long[:, ::1] mv = np.ascontiguousarray(marks, dtype=np.int_)
    cdef Py_ssize_t p = dtv.shape[0], ks = dtv.shape[1], n = c_init.shape[1]
    cdef Py_ssize_t d = bm.shape[0], i, k, a, b, r
    values = np.empty((p, ks + 1, n))
    left = np.empty((p, ks + 1, n))
    cdef double[:, :, ::1] vv = values
    cdef double[:, :, ::1] lv = left
    cdef double[::1] c = np.empty(n)
    cdef double[::1] inc = np.empty(n)
    cdef double acc, tmp
    cdef long e
    for i in range(p):
        for a in range(n):
            c[a] = c_init[i, a]
            vv[i, 0, a] = c[a]
            lv[i, 0, a] = c[a]
        for k in range(ks):
            for a in range(n):
                acc = 0.0
                for b in range(n):
                    acc = acc + dm[a, b] * c[b]
                acc = acc * dtv[i, k]
                for r in range(d):
                    tmp = 0.0
                    for b in range(n):
                        tmp = tmp + bm[r, a, b] * c[b]
                    acc = acc + tmp * dwv[i, k, r]
                inc[a] = acc
            for a in range(n):
                c[a] = c[a] + inc[a]
                lv[i, k + 1, a] = c[a]
            e = mv[i, k]
            if e >= 0:
                for a in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc = acc + jm[e, a, b] * c[b]
                    inc[a] = acc
                for a in range(n):
                    c[a] = c[a] + inc[a]
            for a in range(n):
                vv[i, k + 1, a] = c[a]
    return values, left
