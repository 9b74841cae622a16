"""Backward SDEs with jumps by regression Monte Carlo.

The solver runs backward on the base grid. At node i the conditional
expectations given X_{t_i} are least-squares fits on a polynomial basis of the
forward state, one fit per initial point of the flow. Y uses a theta rule in
the driver,

    Y_i = E_i[Y_{i+1} + (1 - theta) dt f_{i+1}] + theta dt f(t_i, X_i, Y_i, Z_i, U_i),

with the implicit part resolved by Picard sweeps. Z and U regress the
centred Y_{i+1} against dW/dt and the compensated per-mark counts.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import CoefficientModel, ModelError, jacobian_fd
from .noise import EventGrid, MarkSpace, NoiseBundle, TimeGrid, _bridge_values, build_event_grid
from .sde_flow import FlowField, _events_for, as_points, integrate_flow


class RegressionWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class RegressionConfig:
    degree: int = 3
    ridge: float = 1e-10
    sweeps: int = 3
    # weight of the driver at t_i; 1 is the implicit rule, 1/2 the trapezoid
    theta: float = 0.5
    max_condition: float = 1e12

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"degree must be a nonnegative integer, got {self.degree}")
        if not self.ridge >= 0.0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if int(self.sweeps) != self.sweeps or self.sweeps < 0:
            raise ValueError(f"sweeps must be a nonnegative integer, got {self.sweeps}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")


# ---------------------------------------------------------------- regression


class _Basis:
    """Monomials up to ``degree`` in the standardized state.

    Coordinates with no spread across paths (the initial node) are dropped.
    """

    def __init__(self, x: np.ndarray, degree: int):
        self.center = x.mean(axis=0)
        scale = x.std(axis=0)
        active = scale > 1e-13 * (1.0 + np.abs(self.center))
        self.scale = np.where(active, scale, 1.0)
        idx = np.nonzero(active)[0].tolist()
        self.powers = [()]
        for k in range(1, degree + 1):
            self.powers.extend(itertools.combinations_with_replacement(idx, k))

    @property
    def size(self) -> int:
        return len(self.powers)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.center) / self.scale
        cols = np.empty((x.shape[0], self.size))
        cols[:, 0] = 1.0
        for j, c in enumerate(self.powers[1:], start=1):
            col = z[:, c[0]].copy()
            for k in c[1:]:
                col *= z[:, k]
            cols[:, j] = col
        return cols


class _Projector:
    """Ridge least squares through one SVD of the design matrix."""

    def __init__(self, phi: np.ndarray, ridge: float, max_condition: float):
        u, s, vt = np.linalg.svd(phi, full_matrices=False)
        self.cond = float(s[0] / s[-1]) if s[-1] > 0.0 else float("inf")
        lam = ridge * s[0] ** 2
        self.raised = self.cond > max_condition
        if self.raised:
            # caps the conditioning of the regularized problem at max_condition
            lam = max(lam, (s[0] / max_condition) ** 2)
        self.ridge = lam
        self._u, self._vt = u, vt
        self._filt = s / (s * s + lam)

    def coef(self, target: np.ndarray) -> np.ndarray:
        return self._vt.T @ (self._filt[:, None] * (self._u.T @ target))


def _t(t: float, rows: int) -> np.ndarray:
    return np.full(rows, float(t))


def _driver(model: CoefficientModel, t, x, y, z, u) -> np.ndarray:
    out = np.asarray(model.driver(_t(t, x.shape[0]), x, y, z, u), dtype=float)
    if out.shape != y.shape:
        raise ModelError(f"driver returned shape {out.shape}, expected {y.shape} (dim_value={model.dim_value})")
    return out


def _implicit(model, t, dt, x, base, z, u, cfg: RegressionConfig) -> np.ndarray:
    y = base
    if cfg.theta == 0.0:
        return y
    for _ in range(cfg.sweeps):
        y = base + cfg.theta * dt * _driver(model, t, x, y, z, u)
    return y


def _terminal_values(model: CoefficientModel, T: float, x: np.ndarray) -> tuple:
    """Y, Z, U at the horizon: phi(x), d phi sigma, phi(x + g_e) - phi(x)."""
    R = x.shape[0]
    t = _t(T, R)
    y = np.asarray(model.terminal(x), dtype=float)
    if y.shape != (R, model.dim_value):
        raise ModelError(f"terminal returned shape {y.shape}, expected {(R, model.dim_value)}")
    if model.terminal_dx is not None:
        dphi = np.asarray(model.terminal_dx(x), dtype=float)
    else:
        dphi = jacobian_fd(model.terminal, x)
    z = dphi @ np.asarray(model.diffusion(t, x), dtype=float)
    u = np.stack([model.terminal(x + model.jump_coeff(t, e, x)) - y for e in range(model.n_marks)], axis=-1)
    return y, z, u


def base_increments(ev: EventGrid) -> tuple:
    """Brownian increments (P, N, d) and per-mark counts (P, N, E) of the base steps."""
    bn = ev.base_nodes
    dW = ev.W[:, bn[1:]] - ev.W[:, bn[:-1]]
    dN = np.diff(ev.counts(bn), axis=1).astype(float)
    return dW, dN


@dataclass
class _NodeFit:
    t: float
    dt: float
    basis: _Basis
    coef_a: np.ndarray
    coef_z: np.ndarray
    coef_u: np.ndarray
    shape_z: tuple
    shape_u: tuple

    def parts(self, x):
        phi = self.basis(x)
        R = x.shape[0]
        return phi @ self.coef_a, (phi @ self.coef_z).reshape((R,) + self.shape_z), (phi @ self.coef_u).reshape((R,) + self.shape_u)

    def evaluate(self, model, cfg, x, ctx=None):
        base, z, u = self.parts(x)
        return _implicit(model, self.t, self.dt, x, base, z, u, cfg), z, u


@dataclass
class BsdeSolution:
    """Regression solution along the flow of each initial point.

    Y is (P, N+1, M, l), Z is (P, N+1, M, l, d), U is (P, N+1, M, l, E). For a
    gradient solution each carries a trailing axis of length n.
    """

    times: np.ndarray
    X: np.ndarray  # (P, N+1, M, n)
    X_left: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    condition: np.ndarray  # (N, M)
    ridge_raised: int
    config: RegressionConfig
    fits: list = field(default_factory=list, repr=False)  # fits[i][m]
    gradient: bool = False
    dX: np.ndarray | None = None
    base: "BsdeSolution | None" = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def n_points(self) -> int:
        return self.Y.shape[2]

    def initial_points(self) -> np.ndarray:
        return self.X[0, 0]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.Y)) and np.all(np.isfinite(self.Z)) and np.all(np.isfinite(self.U)))

    def node_context(self, i: int, m: int, rows=slice(None)):
        if not self.gradient:
            return None
        b = self.base
        return dict(dX=self.dX[rows, i, m], y=b.Y[rows, i, m], z=b.Z[rows, i, m], u=b.U[rows, i, m])

    def evaluate(self, model, i: int, m: int, x: np.ndarray, ctx=None) -> tuple:
        """This solution's node-i estimators at other states x (R, n)."""
        if i == self.steps:
            raise ValueError("the terminal node has no fitted estimator")
        return self.fits[i][m].evaluate(model, self.config, x, ctx)


def _check_inputs(model: CoefficientModel, flow: FlowField, grid, noise):
    ev = flow.events
    if grid is not None and grid != ev.grid:
        raise ValueError("flow was simulated on a different grid")
    if noise is not None:
        other = _events_for(noise)
        if not np.array_equal(other.path_ids, ev.path_ids):
            raise ValueError("noise ensemble does not match the flow's paths")
    if flow.mesh.shape[1] != model.dim_state:
        raise ModelError("flow and model state dimensions differ")


def solve_bsde(model: CoefficientModel, flow: FlowField, grid: TimeGrid | None = None, noise=None,
               config: RegressionConfig | None = None) -> BsdeSolution:
    """Backward regression for (Y, Z, U) along the flow of each mesh point."""
    cfg = config or RegressionConfig()
    _check_inputs(model, flow, grid, noise)
    ev = flow.events
    X, XL = flow.at_base()
    dW, dN = base_increments(ev)
    times = ev.grid.nodes
    N = ev.grid.steps
    P, _, M, n = X.shape
    l, d, E = model.dim_value, model.dim_brownian, model.n_marks
    rates = model.marks.rates
    th = cfg.theta

    Y = np.empty((P, N + 1, M, l))
    Z = np.empty((P, N + 1, M, l, d))
    U = np.empty((P, N + 1, M, l, E))
    cond = np.zeros((N, M))
    raised = 0
    fits = [[None] * M for _ in range(N)]
    f_next = np.empty((P, M, l))
    for m in range(M):
        y, z, u = _terminal_values(model, times[N], X[:, N, m])
        Y[:, N, m], Z[:, N, m], U[:, N, m] = y, z, u
        f_next[:, m] = _driver(model, times[N], X[:, N, m], y, z, u)

    for i in range(N - 1, -1, -1):
        dt = times[i + 1] - times[i]
        comp = (dN[:, i] - rates * dt) / (rates * dt)  # (P, E)
        for m in range(M):
            x = X[:, i, m]
            y_next = Y[:, i + 1, m]
            basis = _Basis(x, cfg.degree)
            phi = basis(x)
            proj = _Projector(phi, cfg.ridge, cfg.max_condition)
            cond[i, m] = proj.cond
            raised += int(proj.raised)
            cen = y_next - phi @ proj.coef(y_next)
            zt = (cen[:, :, None] * dW[:, i, None, :] / dt).reshape(P, -1)
            ut = (cen[:, :, None] * comp[:, None, :]).reshape(P, -1)
            a = y_next + (1.0 - th) * dt * f_next[:, m]
            fit = _NodeFit(times[i], dt, basis, proj.coef(a), proj.coef(zt), proj.coef(ut), (l, d), (l, E))
            fits[i][m] = fit
            y, z, u = fit.evaluate(model, cfg, x)
            Y[:, i, m], Z[:, i, m], U[:, i, m] = y, z, u
            f_next[:, m] = _driver(model, times[i], x, y, z, u)
    if raised:
        warnings.warn(
            f"regression matrix condition above {cfg.max_condition:g} at {raised} fits "
            f"(max {np.max(cond):.3g}); ridge increased", RegressionWarning, stacklevel=2)
    return BsdeSolution(times, X, XL, Y, Z, U, cond, raised, cfg, fits)


# ---------------------------------------------------------------- gradient


def flow_gradient(model: CoefficientModel, flow: FlowField, h: float = 1e-5) -> np.ndarray:
    """Pathwise central differences dX_t/dx at base nodes, shape (P, N+1, M, n, n)."""
    ev = flow.events
    n = flow.mesh.shape[1]
    cols = []
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        up, _ = integrate_flow(model, ev, flow.mesh + step, record="base")
        dn, _ = integrate_flow(model, ev, flow.mesh - step, record="base")
        cols.append((up - dn) / (2.0 * h))
    return np.stack(cols, axis=-1)


def oracle_flow_gradient(problem, flow: FlowField) -> np.ndarray:
    if problem.flow_dx is None:
        raise ValueError(f"problem {problem.name!r} has no flow-gradient oracle")
    ev = flow.events
    bn = ev.base_nodes
    t = ev.times[:, bn][..., None]
    w = ev.W[:, bn][:, :, None, :]
    c = ev.counts(bn)[:, :, None, :]
    return np.asarray(problem.flow_dx(t, flow.mesh, w, c), dtype=float)


def _driver_dx(model, t, x, y, z, u):
    if model.driver_dx is not None:
        return np.asarray(model.driver_dx(_t(t, x.shape[0]), x, y, z, u), dtype=float)
    return jacobian_fd(lambda xx: _driver(model, t, xx, y, z, u), x)


def _driver_dy(model, t, x, y, z, u):
    if model.driver_dy is not None:
        return np.asarray(model.driver_dy(_t(t, x.shape[0]), x, y, z, u), dtype=float)
    return jacobian_fd(lambda yy: _driver(model, t, x, yy, z, u), y)


def _zu_part(model, t, x, y, z, u, dZ, dU):
    """f(z + dZ_j, u + dU_j) - f(z, u) per column j: exact for drivers linear in (z, u)."""
    f0 = _driver(model, t, x, y, z, u)
    cols = [_driver(model, t, x, y, z + dZ[..., j], u + dU[..., j]) - f0 for j in range(dZ.shape[-1])]
    return np.stack(cols, axis=-1)


def _grad_driver(model, t, x, y, z, u, dX, dY, dZ, dU):
    fx = _driver_dx(model, t, x, y, z, u)
    fy = _driver_dy(model, t, x, y, z, u)
    return fx @ dX + fy @ dY + _zu_part(model, t, x, y, z, u, dZ, dU)


@dataclass
class _GradFit:
    t: float
    dt: float
    basis: _Basis
    coef_a: np.ndarray
    coef_z: np.ndarray
    coef_u: np.ndarray
    shape_y: tuple
    shape_z: tuple
    shape_u: tuple

    def evaluate(self, model, cfg, x, ctx):
        R = x.shape[0]
        phi = self.basis(x)
        dX = ctx["dX"]
        A = (phi @ self.coef_a).reshape((R,) + self.shape_y) @ dX
        dZ = np.einsum("rldk,rkj->rldj", (phi @ self.coef_z).reshape((R,) + self.shape_z), dX)
        dU = np.einsum("rlek,rkj->rlej", (phi @ self.coef_u).reshape((R,) + self.shape_u), dX)
        y, z, u = ctx["y"], ctx["z"], ctx["u"]
        th = cfg.theta
        rhs = A
        if th > 0.0:
            fx = _driver_dx(model, self.t, x, y, z, u)
            fy = _driver_dy(model, self.t, x, y, z, u)
            rhs = A + th * self.dt * (fx @ dX + _zu_part(model, self.t, x, y, z, u, dZ, dU))
            lhs = np.eye(fy.shape[-1]) - th * self.dt * fy
            dY = np.linalg.solve(lhs, rhs)
        else:
            dY = rhs
        return dY, dZ, dU


def solve_variational_bsde(model: CoefficientModel, flow: FlowField, flow_grad: np.ndarray, base_solution: BsdeSolution,
                           grid: TimeGrid | None = None, noise=None, config: RegressionConfig | None = None) -> BsdeSolution:
    """Linear BSDE for (dY, dZ, dU) = d/dx of (Y, Z, U) along the flow.

    Since dY_t = u_x(t, X_t) dX_t, the regressions run on targets multiplied
    by dX_t^{-1}, which are functions of X_t alone, and are mapped back by
    dX_t. The implicit driver part is linear in dY and solved exactly.
    """
    if not model.linear_in_zu:
        raise ModelError("the gradient equation needs a driver declared linear in (z, u)")
    cfg = config or base_solution.config
    _check_inputs(model, flow, grid, noise)
    X, XL = flow.at_base()
    if not np.array_equal(X, base_solution.X):
        raise ValueError("base solution was computed on a different flow")
    dX = np.asarray(flow_grad, dtype=float)
    if dX.shape != X.shape + (X.shape[-1],):
        raise ValueError(f"flow gradient must have shape {X.shape + (X.shape[-1],)}, got {dX.shape}")
    ev = flow.events
    dW, dN = base_increments(ev)
    times = ev.grid.nodes
    N = ev.grid.steps
    P, _, M, n = X.shape
    l, d, E = model.dim_value, model.dim_brownian, model.n_marks
    rates = model.marks.rates
    th = cfg.theta
    b = base_solution

    dY = np.empty((P, N + 1, M, l, n))
    dZ = np.empty((P, N + 1, M, l, d, n))
    dU = np.empty((P, N + 1, M, l, E, n))
    g_next = np.empty((P, M, l, n))
    cond = np.zeros((N, M))
    raised = 0
    fits = [[None] * M for _ in range(N)]
    T = times[N]
    zfun = lambda x: _terminal_values(model, T, x)[1]
    ufun = lambda x: _terminal_values(model, T, x)[2]
    for m in range(M):
        x = X[:, N, m]
        J = model.terminal_dx(x) if model.terminal_dx is not None else jacobian_fd(model.terminal, x)
        dY[:, N, m] = np.asarray(J, dtype=float) @ dX[:, N, m]
        dZ[:, N, m] = np.einsum("rldk,rkj->rldj", jacobian_fd(zfun, x), dX[:, N, m])
        dU[:, N, m] = np.einsum("rlek,rkj->rlej", jacobian_fd(ufun, x), dX[:, N, m])
        g_next[:, m] = _grad_driver(model, T, x, b.Y[:, N, m], b.Z[:, N, m], b.U[:, N, m],
                                    dX[:, N, m], dY[:, N, m], dZ[:, N, m], dU[:, N, m])

    for i in range(N - 1, -1, -1):
        dt = times[i + 1] - times[i]
        comp = (dN[:, i] - rates * dt) / (rates * dt)
        for m in range(M):
            x = X[:, i, m]
            inv = np.linalg.inv(dX[:, i, m])
            basis = _Basis(x, cfg.degree)
            phi = basis(x)
            proj = _Projector(phi, cfg.ridge, cfg.max_condition)
            cond[i, m] = proj.cond
            raised += int(proj.raised)
            nxt = dY[:, i + 1, m]
            ratio = nxt @ inv
            cen = ratio - (phi @ proj.coef(ratio.reshape(P, -1))).reshape(ratio.shape)
            zt = (cen[:, :, None, :] * dW[:, i, None, :, None] / dt).reshape(P, -1)
            ut = (cen[:, :, None, :] * comp[:, None, :, None]).reshape(P, -1)
            a = (nxt + (1.0 - th) * dt * g_next[:, m]) @ inv
            fit = _GradFit(times[i], dt, basis, proj.coef(a.reshape(P, -1)), proj.coef(zt), proj.coef(ut),
                           (l, n), (l, d, n), (l, E, n))
            fits[i][m] = fit
            ctx = dict(dX=dX[:, i, m], y=b.Y[:, i, m], z=b.Z[:, i, m], u=b.U[:, i, m])
            y, z, u = fit.evaluate(model, cfg, x, ctx)
            dY[:, i, m], dZ[:, i, m], dU[:, i, m] = y, z, u
            g_next[:, m] = _grad_driver(model, times[i], x, ctx["y"], ctx["z"], ctx["u"], dX[:, i, m], y, z, u)
    if raised:
        warnings.warn(
            f"regression matrix condition above {cfg.max_condition:g} at {raised} fits; ridge increased",
            RegressionWarning, stacklevel=2)
    return BsdeSolution(times, X, XL, dY, dZ, dU, cond, raised, cfg, fits, gradient=True, dX=dX, base=b)


def finite_difference_gradient(model: CoefficientModel, events: EventGrid, x0, h: float = 1e-3,
                               config: RegressionConfig | None = None) -> np.ndarray:
    """Central difference of Y_0 over re-solves from x0 +- h e_j on shared noise, shape (l, n)."""
    x0 = as_points(x0, model.dim_state)[:1]
    n = model.dim_state
    cols = []
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        y0 = []
        for sgn in (1.0, -1.0):
            mesh = x0 + sgn * step
            vals, left = integrate_flow(model, events, mesh, record="base")
            sol = solve_bsde(model, FlowField(mesh, events, vals, left, "base"), config=config)
            y0.append(sol.Y[:, 0, 0].mean(axis=0))
        cols.append((y0[0] - y0[1]) / (2.0 * h))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------- error bars


def batch_rows(n_paths: int, batches: int) -> list:
    if batches < 2 or batches > n_paths:
        raise ValueError(f"need 2 <= batches <= paths, got {batches} for {n_paths} paths")
    return np.array_split(np.arange(n_paths), batches)


def batch_evaluations(model: CoefficientModel, solution: BsdeSolution, batch_solutions: list) -> list:
    """Each batch's estimators evaluated at the full ensemble's states: [(Y, Z, U), ...].

    The terminal node is exact and copied from ``solution``.
    """
    out = []
    for bs in batch_solutions:
        arrs = [solution.Y.copy(), solution.Z.copy(), solution.U.copy()]
        for i in range(solution.steps):
            for m in range(solution.n_points):
                vals = bs.evaluate(model, i, m, solution.X[:, i, m], solution.node_context(i, m))
                for c in range(3):
                    arrs[c][:, i, m] = vals[c]
        out.append(tuple(arrs))
    return out


def pointwise_standard_errors(model: CoefficientModel, solution: BsdeSolution, batch_solutions: list) -> tuple:
    """Standard errors of the full-ensemble estimators at the full ensemble's states.

    Each batch solution is an independent estimator on 1/B of the paths; its
    spread at a state divided by sqrt(B) estimates the error of the full fit.
    The terminal node is exact and gets zero.
    """
    evals = batch_evaluations(model, solution, batch_solutions)
    B = len(evals)
    return tuple(np.stack([e[c] for e in evals]).std(axis=0, ddof=1) / np.sqrt(B) for c in range(3))


def solve_with_errors(model: CoefficientModel, flow: FlowField, config: RegressionConfig | None = None,
                      batches: int = 8) -> tuple:
    """Full solution plus pointwise standard errors from independent path batches."""
    sol = solve_bsde(model, flow, config=config)
    return sol, pointwise_standard_errors(model, sol, solve_batches(model, flow, config, batches))


def solve_batches(model: CoefficientModel, flow: FlowField, config: RegressionConfig | None = None,
                  batches: int = 8) -> list:
    """Independent solutions on contiguous path batches."""
    return [solve_bsde(model, flow.subset(r), config=config) for r in batch_rows(flow.events.n_paths, batches)]


def variational_with_errors(model, flow, flow_grad, base_solution, batches: int = 8, config=None) -> tuple:
    sol = solve_variational_bsde(model, flow, flow_grad, base_solution, config=config)
    subs = []
    for r in batch_rows(flow.events.n_paths, batches):
        sub = flow.subset(r)
        base = solve_bsde(model, sub, config=base_solution.config)
        subs.append(solve_variational_bsde(model, sub, flow_grad[r], base, config=config))
    return sol, pointwise_standard_errors(model, sol, subs)


@dataclass
class OracleComparison:
    component: str
    rms_error: float
    rms_se: float
    tolerance: float
    passed: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def compare_to_oracle(solution: BsdeSolution, oracle: tuple, se: tuple, sigmas: float = 3.0, floor: float = 0.0,
                      nodes=None) -> list:
    """RMS error against the closed form versus ``sigmas`` RMS standard errors (+ floor).

    Statistics run over paths, mesh points and ``nodes`` (default: all but
    the terminal node, where the solution is exact).
    """
    if nodes is None:
        nodes = np.arange(solution.steps)
    out = []
    for name, est, ref, s in zip(("Y", "Z", "U"), (solution.Y, solution.Z, solution.U), oracle, se):
        err = (est - np.broadcast_to(ref, est.shape))[:, nodes]
        rms = float(np.sqrt(np.mean(err**2)))
        rse = float(np.sqrt(np.mean(s[:, nodes] ** 2)))
        tol = sigmas * rse + floor
        out.append(OracleComparison(name, rms, rse, tol, bool(rms <= tol)))
    return out


def oracle_triple(problem, solution: BsdeSolution) -> tuple:
    """Closed-form (Y, Z, U) at the solution's states."""
    if problem.bsde is None:
        raise ValueError(f"problem {problem.name!r} has no BSDE oracle")
    t = np.broadcast_to(solution.times[None, :, None], solution.X.shape[:3])
    return problem.bsde(t, solution.X, solution.X_left)


def oracle_solution(problem, flow: FlowField) -> BsdeSolution:
    """Closed-form (Y, Z, U) along the simulated flow, packaged as a solution."""
    X, XL = flow.at_base()
    times = flow.events.grid.nodes
    t = np.broadcast_to(times[None, :, None], X.shape[:3])
    if problem.bsde is None:
        raise ValueError(f"problem {problem.name!r} has no BSDE oracle")
    Y, Z, U = (np.asarray(a, dtype=float) for a in problem.bsde(t, X, XL))
    N, M = times.size - 1, X.shape[2]
    return BsdeSolution(times, X, XL, Y, Z, U, np.ones((N, M)), 0, RegressionConfig())


# ---------------------------------------------------------------- a-priori estimate


@dataclass
class EstimateReport:
    p: float
    y_norm: float
    z_norm: float
    u_norm: float
    driver_norm: float
    terminal_norm: float
    lhs: float
    rhs: float
    ratio: float | None
    passed: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def apriori_report(solution: BsdeSolution, model: CoefficientModel, p: float = 2.0) -> EstimateReport:
    """Empirical sides of the a-priori bound.

    Left: ||sup_t |Y_t| ||_p + ||(int |Z|^2 dt)^{1/2}||_p + ||(int sum_e v(e)|U(e)|^2 dt)^{1/2}||_p.
    Right: ||int |f(t, X_t, 0, 0, 0)| dt||_p + ||xi||_p. Samples run over
    paths and initial points.
    """
    if p < 2:
        raise ValueError("the estimate is stated for p >= 2")
    if solution.gradient:
        raise ValueError("apriori_report expects a value solution")
    Y, Z, U = solution.Y, solution.Z, solution.U
    dt = np.diff(solution.times)
    rates = model.marks.rates

    def lp(v):
        return float(np.mean(np.abs(v) ** p) ** (1.0 / p))

    ysup = np.max(np.linalg.norm(Y, axis=-1), axis=1)
    zint = np.einsum("pimab,i->pm", Z[:, :-1] ** 2, dt)
    uint = np.einsum("pimae,e,i->pm", U[:, :-1] ** 2, rates, dt)
    P, N1, M, l = Y.shape
    x = solution.X[:, :-1].reshape(-1, solution.X.shape[-1])
    R = x.shape[0]
    t = np.broadcast_to(solution.times[None, :-1, None], (P, N1 - 1, M)).reshape(-1)
    f0 = np.asarray(model.driver(t, x, np.zeros((R, l)), np.zeros((R, l, model.dim_brownian)),
                                 np.zeros((R, l, model.n_marks))), dtype=float)
    f0 = np.linalg.norm(f0, axis=-1).reshape(P, N1 - 1, M)
    fint = np.einsum("pim,i->pm", f0, dt)
    xi = np.linalg.norm(Y[:, -1], axis=-1)
    yn, zn, un = lp(ysup), lp(np.sqrt(zint)), lp(np.sqrt(uint))
    fn, xn = lp(fint), lp(xi)
    lhs, rhs = yn + zn + un, fn + xn
    finite = all(np.isfinite(v) for v in (lhs, rhs))
    if rhs > 0.0:
        ratio = lhs / rhs
        ok = finite and np.isfinite(ratio)
    else:
        # zero data: the bound forces a zero solution
        ratio = None
        ok = finite and lhs == 0.0
    return EstimateReport(float(p), yn, zn, un, fn, xn, lhs, rhs, ratio, bool(ok))


def homogeneity_drift(model: CoefficientModel, flow: FlowField, scale: float, p: float = 2.0,
                      config: RegressionConfig | None = None) -> float:
    """|ratio(scale * xi) - ratio(xi)| / ratio(xi) for a driver-free model."""
    base = apriori_report(solve_bsde(model, flow, config=config), model, p)
    term = model.terminal
    dterm = model.terminal_dx
    scaled = model.with_terminal(lambda x: scale * term(x),
                                 None if dterm is None else (lambda x: scale * dterm(x)))
    other = apriori_report(solve_bsde(scaled, flow, config=config), scaled, p)
    if base.ratio is None or other.ratio is None:
        return 0.0 if base.ratio == other.ratio else float("inf")
    return abs(other.ratio - base.ratio) / base.ratio


def lipschitz_constants(solution: BsdeSolution) -> np.ndarray:
    """|Y_0(x_m+1) - Y_0(x_m)| / |x_m+1 - x_m| over adjacent initial points."""
    x0 = solution.initial_points()
    y0 = solution.Y[:, 0].mean(axis=0)
    dx = np.linalg.norm(np.diff(x0, axis=0), axis=-1)
    dy = np.linalg.norm(np.diff(y0, axis=0), axis=-1)
    return dy / dx


# ---------------------------------------------------------------- nested oracle


@dataclass
class NestedEstimate:
    mean: np.ndarray  # (l,)
    se: np.ndarray
    replicates: np.ndarray  # (R, l)
    branching: int
    steps: int


def _one_step_bundles(rng: np.random.Generator, grid: TimeGrid, marks: MarkSpace, count: int, d: int) -> list:
    dt = grid.dt
    dW = rng.standard_normal((count, d)) * np.sqrt(dt)
    nj = rng.poisson(marks.total_intensity * dt, count)
    empty_t, empty_m, empty_w = np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, d))
    out = []
    for c in range(count):
        k = int(nj[c])
        w = dW[c : c + 1].copy()
        if k:
            times = np.sort(dt * (1.0 - rng.random(k)))
            mk = rng.choice(marks.size, size=k, p=marks.probabilities).astype(np.int64)
            jw = _bridge_values(rng, grid, w, times)
            out.append(NoiseBundle(grid, marks, 0, c, w, times, mk, jw))
        else:
            out.append(NoiseBundle(grid, marks, 0, c, w, empty_t.copy(), empty_m.copy(), empty_w.copy()))
    return out


def nested_mc_oracle(model: CoefficientModel, x0, grid: TimeGrid, branching: int = 8, replicates: int = 16,
                     seed: int = 0, config: RegressionConfig | None = None) -> NestedEstimate:
    """Brute-force tree estimate of Y_0 for the same discrete scheme.

    Each node spawns ``branching`` independent one-step continuations; the
    conditional expectations of the scheme become averages over siblings.
    Sibling-centred products are rescaled by B/(B-1) to stay unbiased.
    """
    cfg = config or RegressionConfig()
    if grid.steps > 8:
        raise ValueError("the nested oracle is limited to grids of at most 8 steps")
    B = int(branching)
    if B < 2:
        raise ValueError("branching must be at least 2")
    n, d, l, E = model.dim_state, model.dim_brownian, model.dim_value, model.n_marks
    x0 = as_points(x0, n)[:1]
    N, dt = grid.steps, grid.dt
    times = grid.nodes
    rates = model.marks.rates
    one = TimeGrid(dt, 1)
    est = np.empty((replicates, l))
    for r in range(replicates):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=(0x4E5354, r))))
        states = [x0]
        levels = []
        for i in range(N):
            parents = states[-1]
            C = parents.shape[0] * B
            ev = build_event_grid(_one_step_bundles(rng, one, model.marks, C, d), time_offset=times[i])
            start = np.repeat(parents, B, axis=0)[:, None, :]
            vals, _ = integrate_flow(model, ev, start, record="base")
            dw = ev.W[:, -1] - ev.W[:, 0]
            dn = ev.counts([ev.n_substeps])[:, 0].astype(float)
            child = vals[:, -1, 0]
            levels.append((dw, dn))
            states.append(child)
        y, z, u = _terminal_values(model, times[N], states[N])
        f = _driver(model, times[N], states[N], y, z, u)
        for i in range(N - 1, -1, -1):
            dw, dn = levels[i]
            K = states[i].shape[0]
            mean = y.reshape(K, B, l).mean(axis=1)
            cen = y - np.repeat(mean, B, axis=0)
            comp = (dn - rates * dt) / (rates * dt)
            zc = (cen[:, :, None] * dw[:, None, :] / dt).reshape(K, B, l, d).mean(axis=1) * B / (B - 1)
            uc = (cen[:, :, None] * comp[:, None, :]).reshape(K, B, l, E).mean(axis=1) * B / (B - 1)
            a = (y + (1.0 - cfg.theta) * dt * f).reshape(K, B, l).mean(axis=1)
            x = states[i]
            y = _implicit(model, times[i], dt, x, a, zc, uc, cfg)
            z, u = zc, uc
            f = _driver(model, times[i], x, y, z, u)
        est[r] = y[0]
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / np.sqrt(replicates)
    return NestedEstimate(mean, se, est, B, N)
