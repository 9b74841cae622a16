"""Reference numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and semantics. The two agree to rounding.
"""

import numpy as np


def fd_advance(u, h, c2, c1):
    """One explicit stencil step ``u + c2 * D2 u + c1 * D1 u`` row by row.

    ``u``, ``c2`` and ``c1`` have shape (R, M) with M >= 3. Interior points use
    central differences. The two end points use one-sided first differences
    and reuse the second difference of their neighbour.
    """
    u = np.asarray(u, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    c1 = np.asarray(c1, dtype=float)
    d1 = np.empty_like(u)
    d2 = np.empty_like(u)
    d1[:, 1:-1] = (u[:, 2:] - u[:, :-2]) / (2.0 * h)
    d1[:, 0] = (u[:, 1] - u[:, 0]) / h
    d1[:, -1] = (u[:, -1] - u[:, -2]) / h
    d2[:, 1:-1] = (u[:, 2:] - 2.0 * u[:, 1:-1] + u[:, :-2]) / (h * h)
    d2[:, 0] = d2[:, 1]
    d2[:, -1] = d2[:, -2]
    return u + c2 * d2 + c1 * d1


def uniform_interp(values, x0, h, queries):
    """Linear interpolation on the uniform mesh ``x0 + h * j``, row by row.

    Queries outside the mesh are extrapolated linearly from the edge cell and
    flagged. Returns ``(out, extrapolated)``.
    """
    values = np.asarray(values, dtype=float)
    queries = np.asarray(queries, dtype=float)
    m = values.shape[1]
    s = (queries - x0) / h
    idx = np.floor(s)
    extrap = (s < 0.0) | (s > m - 1)
    idx = np.clip(idx, 0, m - 2).astype(np.intp)
    w = s - idx
    left = np.take_along_axis(values, idx, axis=1)
    right = np.take_along_axis(values, idx + 1, axis=1)
    return left + w * (right - left), extrap


def interp_rows(xp, fp, xq):
    """Row-wise linear interpolation through increasing tables.

    ``xp`` has shape (R, M) and must be increasing along each row; ``fp`` has
    the same shape. ``xq`` has shape (R, Q). Outside the table the edge
    segment is extended linearly and the query is flagged.
    """
    xp = np.asarray(xp, dtype=float)
    xq = np.asarray(xq, dtype=float)
    fp = np.broadcast_to(np.asarray(fp, dtype=float), xp.shape)
    r, m = xp.shape
    out = np.empty(xq.shape)
    extrap = np.zeros(xq.shape, dtype=bool)
    for i in range(r):
        row = xp[i]
        j = np.searchsorted(row, xq[i], side="right") - 1
        extrap[i] = (xq[i] < row[0]) | (xq[i] > row[-1])
        j = np.clip(j, 0, m - 2)
        x_lo = row[j]
        x_hi = row[j + 1]
        w = (xq[i] - x_lo) / (x_hi - x_lo)
        f_lo = fp[i, j]
        out[i] = f_lo + w * (fp[i, j + 1] - f_lo)
    return out, extrap


def linear_sde_paths(c0, drift, diff, jumps, dt, dW, marks):
    """Euler scheme for the linear system ``dc = D c dt + B_k c dW^k + jumps``.

    ``c0`` (P, n), ``drift`` (n, n), ``diff`` (d, n, n), ``jumps`` (E, n, n)
    holding the increment map applied at a jump of mark e, ``dt`` (P, K),
    ``dW`` (P, K, d), ``marks`` (P, K) with -1 for no jump at the end of the
    substep. Returns ``(values, left)`` of shape (P, K+1, n).
    """
    c = np.array(c0, dtype=float, copy=True)
    p, k_steps = dt.shape
    n = c.shape[1]
    values = np.empty((p, k_steps + 1, n))
    left = np.empty((p, k_steps + 1, n))
    values[:, 0] = c
    left[:, 0] = c
    d = diff.shape[0]
    for k in range(k_steps):
        inc = (c @ drift.T) * dt[:, k, None]
        for r in range(d):
            inc += (c @ diff[r].T) * dW[:, k, r, None]
        c = c + inc
        left[:, k + 1] = c
        mk = marks[:, k]
        hit = np.nonzero(mk >= 0)[0]
        for i in hit:
            c[i] = c[i] + jumps[mk[i]] @ c[i]
        values[:, k + 1] = c
    return values, left
