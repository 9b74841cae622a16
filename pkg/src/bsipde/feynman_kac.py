"""Random fields (p, q, r) composed from BSDE solutions and the inverse flow.

With Y, Z, U solved along the flow of each initial point xi,

    p(t, x)    = Y_t(X_t^{-1}(x))
    q(t, x)    = Z_t(X_{t-}^{-1}(x)) - dp(t-, x) sigma(t, x)
    r(t, e, x) = p(t-, phi_e^{-1}(x)) - p(t-, x) + U_t(e, X_{t-}^{-1}(phi_e^{-1}(x)))

Fields live on a uniform x mesh at the base nodes. Everything here is one
dimensional in space.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bsde import BsdeSolution, base_increments
from .inverse_flow import InverseField, StabilityError, UnsupportedDimensionError, evaluate_inverse
from .model import CoefficientModel, eval_phi_inverse, phi
from .noise import TimeGrid
from .sde_flow import FlowField


def _uniform(x) -> tuple:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size < 5:
        raise ValueError("the x mesh needs at least 5 points")
    h = (x[-1] - x[0]) / (x.size - 1)
    if h <= 0 or np.max(np.abs(np.diff(x) - h)) > 1e-9 * max(1.0, h):
        raise ValueError("the x mesh must be uniform and increasing")
    return x, float(x[0]), float(h)


def _d1(a: np.ndarray, h: float) -> np.ndarray:
    """Central first difference along the last axis, one-sided at the ends."""
    out = np.empty_like(a)
    out[..., 1:-1] = (a[..., 2:] - a[..., :-2]) / (2.0 * h)
    out[..., 0] = (a[..., 1] - a[..., 0]) / h
    out[..., -1] = (a[..., -1] - a[..., -2]) / h
    return out


def _d2(a: np.ndarray, h: float) -> np.ndarray:
    out = np.empty_like(a)
    out[..., 1:-1] = (a[..., 2:] - 2.0 * a[..., 1:-1] + a[..., :-2]) / (h * h)
    out[..., 0] = out[..., 1]
    out[..., -1] = out[..., -2]
    return out


def _band(Q: int, width: int) -> np.ndarray:
    b = np.zeros(Q, dtype=bool)
    b[:width] = True
    b[Q - width :] = True
    return b


@dataclass
class RandomFieldTriple:
    """p, p(t-), q, r on (path, base node, x) with central-difference derivatives.

    Shapes: p, p_left, dp, d2p (P, N+1, Q, l); q (P, N+1, Q, l, d);
    r (P, N+1, Q, l, E). ``valid`` marks points whose inverse queries stayed
    inside the meshes.
    """

    times: np.ndarray
    mesh: np.ndarray
    p: np.ndarray
    p_left: np.ndarray
    dp: np.ndarray
    d2p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    valid: np.ndarray  # (P, N+1, Q)
    band: np.ndarray  # (Q,)
    dW: np.ndarray  # (P, N, d)
    dN: np.ndarray  # (P, N, E)
    path_ids: np.ndarray

    @property
    def h(self) -> float:
        return float(self.mesh[1] - self.mesh[0])

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def at_node(self, k: int, points: np.ndarray, left: bool = False) -> tuple:
        """Linear interpolation of p(t_k, .) of each path at points (P, R)."""
        arr = self.p_left if left else self.p
        outs = []
        flags = None
        for j in range(arr.shape[-1]):
            v, fl = kernels.uniform_interp(arr[:, k, :, j], float(self.mesh[0]), self.h, points)
            outs.append(v)
            bad, _ = kernels.uniform_interp((~self.valid[:, k]).astype(float), float(self.mesh[0]), self.h, points)
            fl = fl | (bad > 0.0)
            flags = fl if flags is None else flags | fl
        return np.stack(outs, axis=-1), flags

    def with_p(self, p_new: np.ndarray) -> "RandomFieldTriple":
        """Same q and r with p (and p(t-)) replaced; derivatives recomputed."""
        h = self.h
        return dataclasses.replace(self, p=p_new, p_left=p_new, dp=_d1(np.moveaxis(p_new, -2, -1), h).swapaxes(-1, -2),
                                   d2p=_d2(np.moveaxis(p_new, -2, -1), h).swapaxes(-1, -2))


def _base_slots(inverse: InverseField, base_nodes: np.ndarray) -> np.ndarray:
    pos = {int(n): i for i, n in enumerate(inverse.nodes)}
    try:
        return np.array([pos[int(n)] for n in base_nodes])
    except KeyError:
        raise ValueError("the inverse field must be recorded at every base node") from None


def _interp_family(xi: np.ndarray, values: np.ndarray, pts: np.ndarray) -> tuple:
    """Per-path linear interpolation of values (P, M) over the initial mesh xi at pts (P, R)."""
    P = values.shape[0]
    return kernels.interp_rows(np.broadcast_to(xi, (P, xi.size)), values, pts)


def compose_solution(bsde: BsdeSolution, flow: FlowField, inverse: InverseField, model: CoefficientModel,
                     grid: TimeGrid | None = None, exact_terminal: bool = True) -> RandomFieldTriple:
    """Compose the family (Y, Z, U) over initial points with the inverse flow."""
    if model.dim_state != 1:
        raise UnsupportedDimensionError("composition is implemented for n = 1")
    if bsde.gradient:
        raise ValueError("compose needs a value solution, not a gradient solution")
    ev = flow.events
    if grid is not None and grid != ev.grid:
        raise ValueError("flow was simulated on a different grid")
    if inverse.events.grid != ev.grid or not np.array_equal(inverse.events.path_ids, ev.path_ids):
        raise ValueError("inverse field and flow must share noise")
    xi = bsde.initial_points()[:, 0]
    if np.any(np.diff(xi) <= 0):
        raise ValueError("initial points must be increasing")
    x, x0, h = _uniform(inverse.queries)
    slots = _base_slots(inverse, ev.base_nodes)
    times = ev.grid.nodes
    N = ev.grid.steps
    P, Q = bsde.n_paths, x.size
    l, d, E = model.dim_value, model.dim_brownian, model.n_marks
    band1 = _band(Q, 1)
    if inverse.band is not None:
        band1 = band1 | inverse.band

    p = np.empty((P, N + 1, Q, l))
    pl = np.empty_like(p)
    q = np.empty((P, N + 1, Q, l, d))
    r = np.empty((P, N + 1, Q, l, E))
    valid = np.empty((P, N + 1, Q), dtype=bool)
    for k in range(N + 1):
        s = slots[k]
        t = times[k]
        u = inverse.values[:, s]
        ul = inverse.left[:, s]
        bad = np.zeros((P, Q), dtype=bool)
        if inverse.extrapolated is not None:
            bad |= inverse.extrapolated[:, s]
        for j in range(l):
            pv, f1 = _interp_family(xi, bsde.Y[:, k, :, j], u)
            plv, f2 = _interp_family(xi, bsde.Y[:, k, :, j], ul)
            p[:, k, :, j], pl[:, k, :, j] = pv, plv
            bad |= f1 | f2
        if exact_terminal and k == N:
            p[:, k] = pl[:, k] = np.asarray(model.terminal(x[:, None]), dtype=float)[None]
        dpl = _d1(np.moveaxis(pl[:, k], -1, -2), h).swapaxes(-1, -2)  # (P, Q, l)
        sig = np.broadcast_to(np.asarray(model.diffusion(np.full(Q, t), x[:, None]), dtype=float), (Q, 1, d))[:, 0]
        for j in range(l):
            for rr in range(d):
                zv, fz = _interp_family(xi, bsde.Z[:, k, :, j, rr], ul)
                q[:, k, :, j, rr] = zv - dpl[..., j] * sig[None, :, rr]
                bad |= fz
        for e in range(E):
            pre = eval_phi_inverse(model, np.full(Q, t), e, x[:, None])[:, 0]
            pre_p = np.broadcast_to(pre, (P, Q))
            xi_pre, fi = evaluate_inverse(inverse, s, pre_p, left=True)
            bad |= fi
            for j in range(l):
                p_pre, fp = kernels.uniform_interp(pl[:, k, :, j], x0, h, pre_p)
                uv, fu = _interp_family(xi, bsde.U[:, k, :, j, e], xi_pre)
                r[:, k, :, j, e] = p_pre - pl[:, k, :, j] + uv
                bad |= fp | fu
        valid[:, k] = ~bad & ~band1[None, :]
    dp = _d1(np.moveaxis(pl, -1, -2), h).swapaxes(-1, -2)
    d2p = _d2(np.moveaxis(pl, -1, -2), h).swapaxes(-1, -2)
    dW, dN = base_increments(ev)
    return RandomFieldTriple(times, x, p, pl, dp, d2p, q, r, valid, band1, dW, dN, ev.path_ids)


def compose_batches(evaluations: list, bsde: BsdeSolution, flow: FlowField, inverse: InverseField,
                    model: CoefficientModel) -> list:
    """Compose each batch estimator (Y, Z, U evaluated at the full states)."""
    out = []
    for (Y, Z, U) in evaluations:
        sol = dataclasses.replace(bsde, Y=Y, Z=Z, U=U)
        out.append(compose_solution(sol, flow, inverse, model))
    return out


def triple_standard_errors(batch_triples: list) -> tuple:
    """Pointwise standard errors of p, q, r from independent batch compositions."""
    B = len(batch_triples)
    se = []
    for name in ("p", "q", "r"):
        stack = np.stack([getattr(t, name) for t in batch_triples])
        se.append(stack.std(axis=0, ddof=1) / np.sqrt(B))
    return tuple(se)


# ---------------------------------------------------------------- residual


@dataclass
class ResidualReport:
    """Per-step residual of the discretized equation and its running sum.

    ``cumulative[:, k]`` is the defect of the integrated equation between 0
    and t_k; the headline statistics are over paths and interior points of
    max_k |cumulative|.
    """

    step: np.ndarray  # (P, N, Q)
    cumulative: np.ndarray  # (P, N+1, Q)
    mask: np.ndarray  # (P, Q) points interior at every node
    max: float
    rms: float
    step_rms: float
    band: int

    def as_dict(self) -> dict:
        return {"max": self.max, "rms": self.rms, "step_rms": self.step_rms, "band": self.band,
                "points": int(np.count_nonzero(self.mask))}


def bsipde_residual(triple: RandomFieldTriple, model: CoefficientModel, grid: TimeGrid | None = None,
                    band: int = 2) -> ResidualReport:
    """Residual of the time-discretized backward equation along each path.

    Per base step, for the first value component,

        p_{i+1} - p_i + dt [L p_i(-) + M q_i + f_i]
            - dt sum_e v_e [r_e(x) - r_e(phi_e x) + p_i(-)(x) - p_i(-)(phi_e x)]
            - q_i dW_i - sum_e r_e (dN_e - v_e dt).

    The driver's jump argument is r(t, e, phi_e x) - p(t-, x) + p(t-, phi_e x),
    evaluated as written rather than simplified.
    """
    if grid is not None and grid.steps != triple.steps:
        raise ValueError("grid does not match the triple")
    x, h = triple.mesh, triple.h
    x0 = float(x[0])
    P, N1, Q, l = triple.p.shape
    N = N1 - 1
    d, E = triple.q.shape[-1], triple.r.shape[-1]
    rates = model.marks.rates
    times = triple.times
    inner = ~_band(Q, band)
    step = np.zeros((P, N, Q))
    ok = np.broadcast_to(inner, (P, Q)).copy()
    X = x[:, None]
    for i in range(N):
        t = times[i]
        dt = times[i + 1] - t
        tq = np.full(Q, t)
        sig = np.broadcast_to(np.asarray(model.diffusion(tq, X), dtype=float), (Q, 1, d))[:, 0]
        b = np.broadcast_to(np.asarray(model.drift(tq, X), dtype=float), (Q, 1))[:, 0]
        comp = b.copy()
        for e in range(E):
            comp = comp - rates[e] * np.broadcast_to(model.jump_coeff(tq, e, X), (Q, 1))[:, 0]
        pl, dp, d2p = triple.p_left[:, i], triple.dp[:, i], triple.d2p[:, i]
        q = triple.q[:, i]
        r = triple.r[:, i]
        Lp = 0.5 * np.sum(sig * sig, axis=-1)[None, :, None] * d2p + comp[None, :, None] * dp
        dq = _d1(np.moveaxis(q, 1, -1), h)  # (P, l, d, Q)
        Mq = np.einsum("pldq,qd->pql", dq, sig)
        # jump-shifted quantities at phi_e(x)
        r_phi = np.empty_like(r)
        p_phi = np.empty((P, Q, l, E))
        flag = np.zeros((P, Q), dtype=bool)
        for e in range(E):
            xe = np.broadcast_to(phi(model, tq, e, X)[:, 0], (P, Q))
            for j in range(l):
                v, f1 = kernels.uniform_interp(r[:, :, j, e], x0, h, xe)
                w, f2 = kernels.uniform_interp(pl[..., j], x0, h, xe)
                r_phi[:, :, j, e], p_phi[:, :, j, e] = v, w
                flag |= f1 | f2
        z_arg = q + dp[..., None] * sig[None, :, None, :]
        u_arg = r_phi - pl[..., None] + p_phi
        pts = np.broadcast_to(X, (P, Q, 1)).reshape(P * Q, 1)
        f = np.asarray(model.driver(np.full(P * Q, t), pts, triple.p[:, i].reshape(P * Q, l),
                                    z_arg.reshape(P * Q, l, d), u_arg.reshape(P * Q, l, E)), dtype=float)
        f = f.reshape(P, Q, l)
        jump_drift = np.einsum("pqle,e->pql", r - r_phi + pl[..., None] - p_phi, rates)
        res = (triple.p[:, i + 1] - triple.p[:, i] + dt * (Lp + Mq + f) - dt * jump_drift
               - np.einsum("pqld,pd->pql", q, triple.dW[:, i])
               - np.einsum("pqle,pe->pql", r, triple.dN[:, i] - rates * dt))
        step[:, i] = res[..., 0]
        ok &= triple.valid[:, i] & triple.valid[:, i + 1] & ~flag
    cum = np.zeros((P, N + 1, Q))
    np.cumsum(step, axis=1, out=cum[:, 1:])
    peak = np.max(np.abs(cum), axis=1)
    sel = peak[ok]
    mx = float(np.max(sel)) if sel.size else float("nan")
    rms = float(np.sqrt(np.mean(sel**2))) if sel.size else float("nan")
    srms = float(np.sqrt(np.mean(step.transpose(0, 2, 1)[ok] ** 2))) if sel.size else float("nan")
    return ResidualReport(step, cum, ok, mx, rms, srms, band)


def integrability_proxies(triple: RandomFieldTriple, model: CoefficientModel) -> dict:
    """Per-path finite-mesh proxies of the classical-solution integrability bounds."""
    dt = np.diff(triple.times)
    v = triple.valid
    h = triple.h
    rates = model.marks.rates

    def masked_max(a):
        m = v.reshape(v.shape + (1,) * (a.ndim - 3))
        return np.where(m, np.abs(a), 0.0).reshape(a.shape[0], a.shape[1], -1).max(axis=-1)

    p_sup = np.max(np.stack([masked_max(triple.p), masked_max(triple.dp), masked_max(triple.d2p)]), axis=(0, 2))
    q_max = masked_max(triple.q)
    dq = _d1(np.moveaxis(triple.q, 2, -1), h)
    dq_max = np.abs(np.where(v[:, :, None, None, :], dq, 0.0)).reshape(dq.shape[0], dq.shape[1], -1).max(axis=-1)
    q_int = np.einsum("pi,i->p", (np.maximum(q_max, dq_max) ** 2)[:, :-1], dt)
    r_max = np.abs(np.where(v[..., None, None], triple.r, 0.0)).max(axis=(2, 3))  # (P, N+1, E)
    r_int = np.einsum("pie,e,i->p", r_max[:, :-1] ** 2, rates, dt)
    return {"p_sup": p_sup, "q_int": q_int, "r_int": r_int,
            "finite": bool(np.all(np.isfinite(p_sup)) and np.all(np.isfinite(q_int)) and np.all(np.isfinite(r_int)))}


# ---------------------------------------------------------------- PIDE oracle


@dataclass
class PideField:
    times: np.ndarray
    mesh: np.ndarray
    values: np.ndarray  # (N+1, Q, l)
    interior: np.ndarray  # (Q,)

    @property
    def h(self) -> float:
        return float(self.mesh[1] - self.mesh[0])

    def at_node(self, k: int, points: np.ndarray, left: bool = False) -> tuple:
        pts = np.atleast_2d(points)
        outs = []
        flags = None
        for j in range(self.values.shape[-1]):
            tab = np.broadcast_to(self.values[k, :, j], (pts.shape[0], self.mesh.size))
            v, fl = kernels.uniform_interp(tab, float(self.mesh[0]), self.h, pts)
            outs.append(v)
            flags = fl if flags is None else flags | fl
        return np.stack(outs, axis=-1), flags


def pide_reference(model: CoefficientModel, grid: TimeGrid, x_mesh, check_stability: bool = True,
                   band: int = 2) -> PideField:
    """Explicit backward finite differences for the deterministic-coefficient equation

        v_t + L v + sum_e v_e [v(phi_e x) - v(x)] + f(t, x, v, v_x sigma, v(phi_.) - v) = 0,

    with v(T) = terminal. Jump compositions use linear interpolation
    (extrapolating linearly off the mesh).
    """
    if model.dim_state != 1:
        raise UnsupportedDimensionError("the PIDE reference is one dimensional")
    if not model.deterministic:
        raise ValueError("the PIDE reference needs deterministic coefficients")
    x, x0, h = _uniform(x_mesh)
    Q = x.size
    l, d, E = model.dim_value, model.dim_brownian, model.n_marks
    rates = model.marks.rates
    N, dt = grid.steps, grid.dt
    times = grid.nodes
    X = x[:, None]
    v = np.asarray(model.terminal(X), dtype=float).T.copy()  # (l, Q)
    out = np.empty((N + 1, Q, l))
    out[N] = v.T
    for i in range(N - 1, -1, -1):
        t = times[i + 1]
        tq = np.full(Q, t)
        sig = np.broadcast_to(np.asarray(model.diffusion(tq, X), dtype=float), (Q, 1, d))[:, 0]
        comp = np.broadcast_to(np.asarray(model.drift(tq, X), dtype=float), (Q, 1))[:, 0].copy()
        for e in range(E):
            comp -= rates[e] * np.broadcast_to(model.jump_coeff(tq, e, X), (Q, 1))[:, 0]
        diff2 = 0.5 * np.sum(sig * sig, axis=-1)
        if check_stability:
            mu = float(np.max(diff2)) * dt / (h * h)
            nu = float(np.max(np.abs(comp))) * dt / h
            if mu > 0.5 or nu > 1.0:
                lim = [0.5 * dt / mu if mu > 0 else np.inf, dt / nu if nu > 0 else np.inf]
                sugg = 0.9 * min(lim)
                raise StabilityError(
                    f"explicit PIDE step unstable (diffusion number {mu:.3g}, advection number {nu:.3g}); "
                    f"use a time step of at most {sugg:.3g}", sugg)
        d1 = _d1(v, h)
        new = kernels.fd_advance(v, h, np.broadcast_to(diff2 * dt, v.shape), np.broadcast_to(comp * dt, v.shape))
        u = np.empty((Q, l, E))
        for e in range(E):
            xe = np.broadcast_to(phi(model, tq, e, X)[:, 0], v.shape)
            ve, _ = kernels.uniform_interp(v, x0, h, xe)
            u[:, :, e] = (ve - v).T
        z = d1.T[:, :, None] * sig[:, None, :]
        f = np.asarray(model.driver(tq, X, v.T, z, u), dtype=float)
        v = new + dt * (np.einsum("qle,e->lq", u, rates) + f.T)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"PIDE solution became non-finite at t={times[i]:.6g}")
        out[i] = v.T
    return PideField(times, x, out, ~_band(Q, band))


# ---------------------------------------------------------------- uniqueness


class FieldFunction:
    """Wrap a deterministic callable ``fn(t, x) -> (..., l)`` as a field."""

    def __init__(self, fn, times):
        self.fn = fn
        self.times = np.asarray(times, dtype=float)

    def at_node(self, k: int, points: np.ndarray, left: bool = False) -> tuple:
        pts = np.asarray(points, dtype=float)
        vals = np.asarray(self.fn(np.full(pts.shape, self.times[k]), pts[..., None]), dtype=float)
        return vals, np.zeros(pts.shape, dtype=bool)


@dataclass
class CrosscheckReport:
    max: float
    rms: float
    per_node_max: np.ndarray = field(repr=False)
    count: int = 0
    excluded: int = 0

    def as_dict(self) -> dict:
        return {"max": self.max, "rms": self.rms, "count": self.count, "excluded": self.excluded}


def uniqueness_crosscheck(candidate, flow: FlowField, bsde: BsdeSolution, grid: TimeGrid | None = None,
                          nodes=None, se: np.ndarray | None = None) -> CrosscheckReport:
    """max over paths and nodes of |candidate(t, X_t(x)) - Y_t(x)|.

    ``candidate`` is anything with ``at_node(k, points)`` (a composed triple,
    a PIDE field, a FieldFunction) or a plain callable of (t, x). Points that
    leave the candidate's mesh are excluded and counted.
    """
    if callable(candidate) and not hasattr(candidate, "at_node"):
        candidate = FieldFunction(candidate, bsde.times)
    if grid is not None and grid != flow.grid:
        raise ValueError("flow was simulated on a different grid")
    X = bsde.X
    N = bsde.steps
    if nodes is None:
        nodes = np.arange(N + 1)
    per = np.zeros(len(nodes))
    sq = 0.0
    cnt = 0
    excl = 0
    for j, k in enumerate(nodes):
        pts = X[:, k, :, 0]
        vals, fl = candidate.at_node(int(k), pts)
        diff = np.abs(vals - bsde.Y[:, k])[..., 0]
        keep = ~fl
        excl += int(np.count_nonzero(fl))
        if keep.any():
            per[j] = float(np.max(diff[keep]))
            sq += float(np.sum(diff[keep] ** 2))
            cnt += int(np.count_nonzero(keep))
    return CrosscheckReport(float(np.max(per)) if per.size else 0.0, float(np.sqrt(sq / max(cnt, 1))), per, cnt, excl)


# ---------------------------------------------------------------- helpers


def oracle_triple_fields(problem, triple: RandomFieldTriple) -> tuple:
    """Closed-form p on the triple's (t, x) grid, with q = r = 0 for Markovian catalog problems."""
    if problem.field is None:
        raise ValueError(f"problem {problem.name!r} has no deterministic field oracle")
    T, Q = triple.times.size, triple.mesh.size
    t = np.broadcast_to(triple.times[:, None], (T, Q))
    x = np.broadcast_to(triple.mesh[None, :, None], (T, Q, 1))
    p = np.asarray(problem.field(t, x), dtype=float)
    return p[None], np.zeros_like(triple.q), np.zeros_like(triple.r)
