"""Three constructions of the inverse flow y -> X_t^{-1}(y).

* ``grid``: invert the monotone table x -> X_t(x) by linear interpolation
* ``sipde``: explicit finite differences for the backward-looking SPDE that
  u(t, y) = X_t^{-1}(y) solves, on a uniform mesh, forward in time
* ``backward``: reverse-time Euler for the backward SDE started at y
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import CoefficientModel, diffusion_jacobian, eval_phi_inverse
from .noise import EventGrid, TimeGrid
from .sde_flow import DEFAULT_CHUNK, FlowField, _events_for, as_points, run_chunks


class UnsupportedDimensionError(ValueError):
    pass


class NonInvertibleSampleError(ValueError):
    pass


class StabilityError(ValueError):
    def __init__(self, msg, suggested_dt):
        super().__init__(msg)
        self.suggested_dt = suggested_dt


class UnsupportedModelError(ValueError):
    pass


@dataclass
class InverseField:
    """u(t, y) at query points y for each recorded node of each path.

    ``nodes`` holds the padded node index of each recorded time slot.
    """

    queries: np.ndarray  # (Q,)
    values: np.ndarray  # (P, T, Q)
    left: np.ndarray  # (P, T, Q)
    method: str
    events: EventGrid
    nodes: np.ndarray  # (T,)
    extrapolated: np.ndarray = None  # (P, T, Q) bool
    band: np.ndarray = None  # (Q,) bool, boundary band of the stencil

    @property
    def times(self) -> np.ndarray:
        return self.events.times[:, self.nodes]

    def interior(self) -> np.ndarray:
        mask = np.ones(self.values.shape, dtype=bool)
        if self.band is not None:
            mask &= ~self.band
        if self.extrapolated is not None:
            mask &= ~self.extrapolated
        return mask


def _require_1d(n: int) -> None:
    if n != 1:
        raise UnsupportedDimensionError(f"this construction supports n = 1 only, got n = {n}")


def _record_slots(ev: EventGrid, record) -> np.ndarray:
    if isinstance(record, str):
        if record == "all":
            return np.arange(ev.n_substeps + 1)
        if record == "base":
            return np.asarray(ev.base_nodes)
        raise ValueError(f"unknown record mode {record!r}")
    return np.asarray(ev.base_nodes)[np.asarray(record)]


def invert_flow_grid(flow: FlowField, queries) -> InverseField:
    """Piecewise-linear inverse of x -> X_t(x) at every recorded node."""
    _require_1d(flow.mesh.shape[1])
    order = np.argsort(flow.mesh[:, 0])
    fp = flow.mesh[order, 0]
    q = np.asarray(queries, dtype=float).reshape(-1)
    P, T = flow.values.shape[:2]
    out = []
    for arr in (flow.values, flow.left):
        xp = arr[:, :, order, 0].reshape(P * T, -1)
        bad = np.diff(xp, axis=1) <= 0.0
        if bad.any():
            r = int(np.nonzero(bad.any(axis=1))[0][0])
            raise NonInvertibleSampleError(
                f"x -> X_t(x) is not increasing on path {flow.events.path_ids[r // T]} at slot {r % T}"
            )
        vals, ext = kernels.interp_rows(xp, fp, np.broadcast_to(q, (P * T, q.size)))
        out.append((vals.reshape(P, T, -1), ext.reshape(P, T, -1)))
    nodes = np.arange(T) if flow.recorded == "all" else np.asarray(flow.events.base_nodes)
    return InverseField(q, out[0][0], out[1][0], "grid", flow.events, nodes, out[0][1] | out[1][1])


# ---------------------------------------------------------------- SIPDE


def _uniform_mesh(mesh) -> tuple:
    m = np.asarray(mesh, dtype=float).reshape(-1)
    if m.size < 4:
        raise ValueError("the finite-difference mesh needs at least 4 points")
    h = (m[-1] - m[0]) / (m.size - 1)
    if h <= 0 or np.max(np.abs(np.diff(m) - h)) > 1e-9 * max(1.0, abs(h)):
        raise ValueError("the finite-difference mesh must be uniform and increasing")
    return m, float(m[0]), float(h)


def sipde_coefficients(model: CoefficientModel, t: np.ndarray, mesh: np.ndarray) -> tuple:
    """Second-order, first-order and noise coefficients of the SIPDE on the mesh.

    Returns ``(diff2, adv, sig)`` with shapes (P, M), (P, M), (P, M, d) where the
    equation reads du = (diff2 u_yy + adv u_y) dt - sum_r sig_r u_y dW^r.
    The compensated jump part contributes ``+ sum_e v_e g`` to ``adv``; the
    remaining jump action is the composition at jump times.
    """
    P, M = t.shape[0], mesh.size
    tt = t[:, None]
    x = mesh[:, None]
    sig = np.broadcast_to(np.asarray(model.diffusion(tt, x), dtype=float), (P, M, 1, model.dim_brownian))[:, :, 0, :]
    dsig = np.broadcast_to(diffusion_jacobian(model, tt, x), (P, M, 1, model.dim_brownian, 1))[:, :, 0, :, 0]
    b = np.broadcast_to(np.asarray(model.drift(tt, x), dtype=float), (P, M, 1))[..., 0]
    diff2 = 0.5 * np.sum(sig * sig, axis=-1)
    adv = np.sum(sig * dsig, axis=-1) - b
    rates = model.marks.rates
    for e in range(model.n_marks):
        adv = adv + rates[e] * np.broadcast_to(model.jump_coeff(tt, e, x), (P, M, 1))[..., 0]
    return diff2, adv, sig


def _sipde_chunk(model, ev: EventGrid, mesh, x0, h, slots, check_stability=True):
    P, M = ev.n_paths, mesh.size
    u = np.broadcast_to(mesh, (P, M)).copy()
    pos = np.full(ev.n_substeps + 1, -1)
    pos[slots] = np.arange(slots.size)
    values = np.full((P, slots.size, M), np.nan)
    left = np.full_like(values, np.nan)
    ext = np.zeros(values.shape, dtype=bool)
    jump_ext = np.zeros((P, M), dtype=bool)
    if pos[0] >= 0:
        values[:, pos[0]] = u
        left[:, pos[0]] = u
    for k in range(ev.n_substeps):
        dt = ev.dt[:, k]
        if np.any(dt > 0.0):
            diff2, adv, sig = sipde_coefficients(model, ev.times[:, k], mesh)
            if check_stability:
                mu = np.max(diff2 * dt[:, None]) / (h * h)
                nu = np.max(np.abs(adv) * dt[:, None]) / h
                if mu > 0.5 or nu > 1.0:
                    dmax = float(np.max(dt))
                    lim = []
                    if mu > 0:
                        lim.append(0.5 * dmax / mu)
                    if nu > 0:
                        lim.append(dmax / nu)
                    sugg = 0.9 * min(lim)
                    raise StabilityError(
                        f"explicit step unstable (diffusion number {mu:.3g} > 0.5 or advection number "
                        f"{nu:.3g} > 1); use a time step of at most {sugg:.3g} or a coarser mesh",
                        sugg,
                    )
            noise = np.zeros((P, M))
            for r in range(sig.shape[-1]):
                noise = noise - sig[..., r] * ev.dW[:, k, r, None]
            u = kernels.fd_advance(u, h, diff2 * dt[:, None], adv * dt[:, None] + noise)
        s = pos[k + 1]
        if s >= 0:
            left[:, s] = u
        mk = ev.marks[:, k]
        rows = np.nonzero(mk >= 0)[0]
        if rows.size:
            t_next = ev.times[:, k + 1]
            for e in np.unique(mk[rows]):
                sel = rows[mk[rows] == e]
                pre = eval_phi_inverse(model, t_next[sel][:, None], int(e), mesh[:, None])[..., 0]
                pre = np.broadcast_to(pre, (sel.size, M))
                new, fl = kernels.uniform_interp(u[sel], x0, h, pre)
                u[sel] = new
                jump_ext[sel] |= fl
        if s >= 0:
            values[:, s] = u
            ext[:, s] = jump_ext
        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"SIPDE solution became non-finite at t={float(np.max(ev.times[:, k + 1])):.6g}")
    return values, left, ext


def integrate_inverse_sipde(model: CoefficientModel, grid: TimeGrid | None, noise, spatial_mesh, record="all",
                            band: int = 1, workers: int = 1, chunk: int = DEFAULT_CHUNK) -> InverseField:
    """Inverse flow on a uniform mesh by explicit finite differences.

    ``record`` is "all", "base", or an array of base-node indices. ``band``
    boundary points at each end are flagged since they use one-sided stencils.
    Points whose jump pre-image left the mesh are flagged as extrapolated from
    then on.
    """
    _require_1d(model.dim_state)
    if not model.deterministic:
        raise UnsupportedModelError("the SIPDE construction needs deterministic coefficients")
    ev = _events_for(noise)
    mesh, x0, h = _uniform_mesh(spatial_mesh)
    slots = _record_slots(ev, record)
    parts = run_chunks(lambda sub, rows: _sipde_chunk(model, sub, mesh, x0, h, slots), ev, chunk, workers)
    values = np.concatenate([p[0] for p in parts])
    left = np.concatenate([p[1] for p in parts])
    ext = np.concatenate([p[2] for p in parts])
    band_mask = np.zeros(mesh.size, dtype=bool)
    if band > 0:
        band_mask[:band] = True
        band_mask[-band:] = True
    return InverseField(mesh, values, left, "sipde", ev, slots, ext, band_mask)


def evaluate_inverse(field: InverseField, slot: int, points: np.ndarray, left: bool = False) -> tuple:
    """Interpolate u(t, .) of every path at per-path points (P, R). Returns (values, flags)."""
    arr = field.left if left else field.values
    table = arr[:, slot]
    pts = np.asarray(points, dtype=float)
    if field.method == "sipde":
        q = field.queries
        vals, fl = kernels.uniform_interp(table, float(q[0]), float(q[1] - q[0]), pts)
    else:
        vals, fl = kernels.interp_rows(np.broadcast_to(field.queries, table.shape), table, pts)
    if field.band is not None and field.method == "sipde":
        # points whose stencil cell touches the band
        q = field.queries
        hh = q[1] - q[0]
        nb = int(np.count_nonzero(field.band[: q.size // 2]))
        fl = fl | (pts < q[0] + nb * hh) | (pts > q[-1] - nb * hh)
    if field.extrapolated is not None:
        ext_rows = field.extrapolated[:, slot]
        if ext_rows.any():
            bad, _ = kernels.interp_rows(np.broadcast_to(field.queries, table.shape), ext_rows.astype(float), pts)
            fl = fl | (bad > 0.0)
    return vals, fl


# ---------------------------------------------------------------- backward SDE


def backward_drift_correction(model: CoefficientModel, t, x) -> np.ndarray:
    """2c(t,x) with c^k = 1/2 sum_ij d_i sigma^{kj} sigma^{ij}."""
    sig = np.asarray(model.diffusion(t, x), dtype=float)
    dsig = diffusion_jacobian(model, t, x)
    sig = np.broadcast_to(sig, dsig.shape[:-1])
    return np.einsum("...kji,...ij->...k", dsig, sig)


def integrate_inverse_backward_sde(model: CoefficientModel, grid: TimeGrid | None, noise, queries, end_times,
                                   workers: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """X_t^{-1}(y) for each end time t by reverse-time Euler from t down to 0.

    ``queries`` is (Q, n) shared by all paths, or (P, len(end_times), Q, n)
    per path and end time. ``end_times`` must be base-grid nodes. Returns an
    array (P, len(end_times), Q, n).
    """
    if not model.deterministic:
        raise UnsupportedModelError("the backward SDE construction needs deterministic coefficients")
    ev = _events_for(noise)
    g = ev.grid
    end_times = np.atleast_1d(np.asarray(end_times, dtype=float))
    kb = np.rint(end_times / g.dt).astype(int)
    if np.any(np.abs(g.nodes[np.clip(kb, 0, g.steps)] - end_times) > 1e-12 * max(1.0, g.horizon)) or np.any(kb < 0) or np.any(kb > g.steps):
        raise ValueError("end times must be base-grid nodes")
    ends = np.asarray(ev.base_nodes)[kb]
    q = np.asarray(queries, dtype=float)
    n = model.dim_state
    per_path = q.ndim == 4
    if not per_path:
        q = as_points(q, n)

    def job(sub: EventGrid, rows):
        P = sub.n_paths
        if per_path:
            psi = q[rows].copy()
        else:
            psi = np.broadcast_to(q, (P, ends.size) + q.shape).copy()
        order = np.argsort(ends, kind="stable")
        psi = psi[:, order]
        e_sorted = ends[order]
        rates = model.marks.rates
        top = int(e_sorted.max()) if e_sorted.size else 0
        for k in range(top - 1, -1, -1):
            i0 = int(np.searchsorted(e_sorted, k + 1, side="left"))
            if i0 >= e_sorted.size:
                continue
            act = psi[:, i0:]
            A, Q = act.shape[1], act.shape[2]
            x = act.reshape(P, A * Q, n)
            t1 = sub.times[:, k + 1][:, None]
            # undo the jump at node k+1 first
            mk = sub.marks[:, k]
            rows_j = np.nonzero(mk >= 0)[0]
            for e in np.unique(mk[rows_j]) if rows_j.size else []:
                sel = rows_j[mk[rows_j] == e]
                x[sel] = eval_phi_inverse(model, t1[sel], int(e), x[sel])
            dt = sub.dt[:, k]
            if np.any(dt > 0.0):
                drift = -np.asarray(model.drift(t1, x), dtype=float) + backward_drift_correction(model, t1, x)
                for e in range(model.n_marks):
                    drift = drift + rates[e] * model.jump_coeff(t1, e, x)
                sig = np.asarray(model.diffusion(t1, x), dtype=float)
                inc = drift * dt[:, None, None]
                for r in range(sub.dW.shape[2]):
                    inc = inc - sig[..., r] * sub.dW[:, k, r, None, None]
                x = x + inc
            psi[:, i0:] = x.reshape(P, A, Q, n)
        inv = np.empty_like(psi)
        inv[:, order] = psi
        return inv

    parts = run_chunks(job, ev, chunk, workers)
    return np.concatenate(parts)


# ---------------------------------------------------------------- checks


@dataclass
class IdentityReport:
    method: str
    rms: float
    max: float
    count: int
    per_path_rms: np.ndarray = field(repr=False, default=None)


def check_nodes(grid: TimeGrid, count: int = 32) -> np.ndarray:
    """About ``count`` evenly spaced base-node indices, always ending at T."""
    count = max(1, min(count, grid.steps))
    return np.unique(np.rint(np.linspace(0, grid.steps, count + 1)).astype(int))


def inverse_identity(model: CoefficientModel, noise, mesh_x, method: str, sipde_mesh=None, band: int = 1,
                     n_check: int | None = None, chunk: int = DEFAULT_CHUNK, workers: int = 1) -> IdentityReport:
    """RMS and max over paths, mesh points and base nodes of |u(t, X_t(x)) - x|.

    Fields are built chunk by chunk and dropped after use to bound memory.
    """
    from .sde_flow import integrate_flow

    ev = _events_for(noise)
    mesh_x = as_points(mesh_x, model.dim_state)
    g = ev.grid
    nodes = np.arange(g.steps + 1) if n_check is None else check_nodes(g, n_check)

    def job(sub: EventGrid, rows):
        vals, _ = integrate_flow(model, sub, mesh_x, record="base", chunk=sub.n_paths)
        X = vals[:, nodes]  # (P, T, M, n)
        if method == "grid":
            if model.dim_state != 1:
                raise UnsupportedDimensionError("grid inversion supports n = 1 only")
            # invert the table onto the query mesh, then read it at X_t(x)
            ymesh = mesh_x[:, 0] if sipde_mesh is None else np.asarray(sipde_mesh, dtype=float).reshape(-1)
            inv = invert_flow_grid(FlowField(mesh_x, sub, vals, vals, "base"), ymesh)
            P, T, M = X.shape[:3]
            err = np.empty((P, T, M))
            ok = np.ones((P, T, M), dtype=bool)
            for i, kk in enumerate(nodes):
                uu, fl = evaluate_inverse(inv, int(kk), X[:, i, :, 0])
                err[:, i] = np.abs(uu - mesh_x[None, :, 0])
                ok[:, i] = ~fl
        elif method == "sipde":
            if sipde_mesh is None:
                raise ValueError("the sipde method needs a spatial mesh")
            inv = integrate_inverse_sipde(model, None, sub, sipde_mesh, record=nodes, band=band, chunk=sub.n_paths)
            P, T, M = X.shape[:3]
            err = np.empty((P, T, M))
            ok = np.ones((P, T, M), dtype=bool)
            for i in range(T):
                uu, fl = evaluate_inverse(inv, i, X[:, i, :, 0])
                err[:, i] = np.abs(uu - mesh_x[None, :, 0])
                ok[:, i] = ~fl
        elif method == "backward":
            t_end = g.nodes[nodes]
            psi = integrate_inverse_backward_sde(model, None, sub, X, t_end, chunk=sub.n_paths)
            err = np.max(np.abs(psi - mesh_x[None, None]), axis=-1)
            ok = np.ones(err.shape, dtype=bool)
        else:
            raise ValueError(f"unknown method {method!r}; use grid, sipde or backward")
        sq = np.where(ok, err * err, 0.0)
        return sq.sum(axis=(1, 2)), np.where(ok, err, 0.0).max(axis=(1, 2)), ok.sum(axis=(1, 2))

    parts = run_chunks(job, ev, chunk, workers)
    sq = np.concatenate([p[0] for p in parts])
    mx = np.concatenate([p[1] for p in parts])
    cnt = np.concatenate([p[2] for p in parts])
    total = int(cnt.sum())
    rms = float(np.sqrt(sq.sum() / total)) if total else float("nan")
    per_path = np.sqrt(sq / np.maximum(cnt, 1))
    return IdentityReport(method, rms, float(mx.max()) if mx.size else 0.0, total, per_path)
