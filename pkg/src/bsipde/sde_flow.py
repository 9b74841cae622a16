"""Forward stochastic flow by a jump-adapted Euler scheme."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import CoefficientModel, eval_phi_inverse
from .noise import EventGrid, NoiseBundle, TimeGrid, build_event_grid

DEFAULT_CHUNK = 32


class FlowBlowUpError(FloatingPointError):
    pass


@dataclass
class FlowField:
    """Flow values X_t(x_m) and left limits X_{t-}(x_m).

    With ``recorded == "all"`` the time axis is the padded node axis of
    ``events``; with ``"base"`` it is the base grid.
    """

    mesh: np.ndarray  # (M, n)
    events: EventGrid
    values: np.ndarray  # (P, T, M, n)
    left: np.ndarray  # (P, T, M, n)
    recorded: str = "all"

    @property
    def grid(self) -> TimeGrid:
        return self.events.grid

    @property
    def times(self) -> np.ndarray:
        if self.recorded == "all":
            return self.events.times
        return np.broadcast_to(self.events.grid.nodes, (self.events.n_paths, self.events.grid.steps + 1))

    def node_index(self, k_base: int) -> int:
        """Position of base node k on the recorded time axis."""
        return int(self.events.base_nodes[k_base]) if self.recorded == "all" else int(k_base)

    def at_base(self) -> tuple:
        if self.recorded == "base":
            return self.values, self.left
        idx = self.events.base_nodes
        return self.values[:, idx], self.left[:, idx]

    def subset(self, rows) -> "FlowField":
        rows = np.asarray(rows)
        return FlowField(self.mesh, self.events.subset(rows), self.values[rows], self.left[rows], self.recorded)

    def path_view(self, p: int) -> tuple:
        """Own jump-adapted grid of path p: (times, values, left) with padding removed."""
        if self.recorded != "all":
            raise ValueError("path_view needs a flow recorded at every node")
        idx = self.events.path_nodes(p)
        return self.events.times[p, idx], self.values[p, idx], self.left[p, idx]


def as_points(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if n == 1 else x.reshape(1, n)
    if x.shape[-1] != n:
        raise ValueError(f"points must have last dimension {n}, got shape {x.shape}")
    return x


def apply_jumps(model: CoefficientModel, t: np.ndarray, marks: np.ndarray, X: np.ndarray) -> None:
    """In place ``X[p] += g(t[p], e_p, X[p])`` for rows with a mark."""
    rows = np.nonzero(marks >= 0)[0]
    if rows.size == 0:
        return
    for e in np.unique(marks[rows]):
        sel = rows[marks[rows] == e]
        X[sel] = X[sel] + model.jump_coeff(t[sel][:, None], int(e), X[sel])


def euler_increment(model: CoefficientModel, t: np.ndarray, dt: np.ndarray, dW: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Compensated Euler increment for a batch: X has shape (P, M, n)."""
    tt = t[:, None]
    drift = np.asarray(model.drift(tt, X), dtype=float)
    rates = model.marks.rates
    for e in range(model.n_marks):
        drift = drift - rates[e] * model.jump_coeff(tt, e, X)
    sig = np.asarray(model.diffusion(tt, X), dtype=float)
    inc = drift * dt[:, None, None]
    for r in range(dW.shape[1]):
        inc = inc + sig[..., r] * dW[:, None, None, r]
    return inc


def _integrate_chunk(model, ev: EventGrid, x_start: np.ndarray, k0: int, record: str):
    P = ev.n_paths
    X = np.array(np.broadcast_to(x_start, (P,) + x_start.shape[-2:]), dtype=float)
    K = ev.n_substeps
    if record == "all":
        slots = np.full(K + 1, -1)
        slots[k0:] = np.arange(K + 1 - k0)
        n_rec = K + 1 - k0
    else:
        slots = np.full(K + 1, -1)
        bn = ev.base_nodes
        slots[bn] = np.arange(bn.size)
        n_rec = bn.size
    values = np.full((P, n_rec) + X.shape[1:], np.nan)
    left = np.full_like(values, np.nan)
    if slots[k0] >= 0:
        values[:, slots[k0]] = X
        left[:, slots[k0]] = X
    for k in range(k0, K):
        dt = ev.dt[:, k]
        if np.any(dt > 0.0):
            X = X + euler_increment(model, ev.times[:, k], dt, ev.dW[:, k], X)
        s = slots[k + 1]
        if s >= 0:
            left[:, s] = X
        apply_jumps(model, ev.times[:, k + 1], ev.marks[:, k], X)
        if s >= 0:
            values[:, s] = X
        if not np.all(np.isfinite(X)):
            bad = np.nonzero(~np.isfinite(X).reshape(P, -1).all(axis=1))[0][0]
            raise FlowBlowUpError(
                f"non-finite state on path {ev.path_ids[bad]} at t={ev.times[bad, k + 1]:.6g}; reduce the step size"
            )
    return values, left


def run_chunks(fn, ev: EventGrid, chunk: int, workers: int) -> list:
    """Apply ``fn(sub_event_grid)`` to fixed-size row chunks, in order.

    Chunk boundaries depend only on ``chunk``, never on ``workers``, so results
    are identical for any worker count.
    """
    P = ev.n_paths
    chunk = max(1, int(chunk))
    pieces = [np.arange(i, min(i + chunk, P)) for i in range(0, P, chunk)]
    if workers <= 1 or len(pieces) == 1:
        return [fn(ev.subset(rows), rows) for rows in pieces]
    with ThreadPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(lambda rows: fn(ev.subset(rows), rows), pieces))


def _events_for(noise) -> EventGrid:
    if isinstance(noise, EventGrid):
        return noise
    if isinstance(noise, NoiseBundle):
        noise = [noise]
    return build_event_grid(list(noise))


def integrate_flow(model: CoefficientModel, events: EventGrid, x0, start_node: int = 0, record: str = "all",
                   workers: int = 1, chunk: int = DEFAULT_CHUNK) -> tuple:
    """Run the scheme from padded node ``start_node``.

    ``x0`` has shape (M, n) or (P, M, n). Returns (values, left).
    """
    x0 = np.asarray(x0, dtype=float)
    per_path = x0.ndim == 3

    def job(ev, rows):
        xs = x0[rows] if per_path else x0
        return _integrate_chunk(model, ev, xs, start_node, record)

    parts = run_chunks(job, events, chunk, workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def simulate_flow(model: CoefficientModel, grid: TimeGrid | None, noise, mesh, record: str = "all",
                  workers: int = 1, chunk: int = DEFAULT_CHUNK) -> FlowField:
    """Stochastic flow over a mesh of initial points for one or many noise paths."""
    if not model.deterministic:
        raise ValueError("flow simulation needs deterministic coefficients")
    ev = _events_for(noise)
    if grid is not None and grid != ev.grid:
        raise ValueError("noise was generated on a different grid")
    mesh = as_points(mesh, model.dim_state)
    if mesh.shape[0] == 0:
        raise ValueError("mesh must be nonempty")
    values, left = integrate_flow(model, ev, mesh, record=record, workers=workers, chunk=chunk)
    return FlowField(mesh, ev, values, left, record)


@dataclass
class FlowPropertyReport:
    semigroup_error: float
    jump_relation_error: float
    monotonicity_violations: int
    n_jumps: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def check_flow_properties(model: CoefficientModel, grid: TimeGrid | None, noise, mesh, restart_time: float,
                          flow: FlowField | None = None) -> FlowPropertyReport:
    ev = _events_for(noise) if flow is None else flow.events
    g = ev.grid
    k_t = int(np.rint(restart_time / g.dt))
    if abs(g.nodes[k_t] - restart_time) > 1e-12 * max(1.0, g.horizon):
        raise ValueError(f"restart time {restart_time} is not a grid node")
    if flow is None or flow.recorded != "all":
        flow = simulate_flow(model, None, ev, mesh)
    start = int(ev.base_nodes[k_t])
    restarted, _ = integrate_flow(model, ev, flow.values[:, start], start_node=start)
    semigroup = float(np.max(np.abs(restarted - flow.values[:, start:]))) if restarted.size else 0.0

    jump_err = 0.0
    p_idx, k_idx = np.nonzero(ev.marks >= 0)
    for e in np.unique(ev.marks[p_idx, k_idx]) if p_idx.size else []:
        sel = ev.marks[p_idx, k_idx] == e
        pp, kk = p_idx[sel], k_idx[sel] + 1
        t = ev.times[pp, kk][:, None]
        back = eval_phi_inverse(model, t, int(e), flow.values[pp, kk])
        jump_err = max(jump_err, float(np.max(np.abs(back - flow.left[pp, kk]))))

    viol = 0
    if model.dim_state == 1 and flow.mesh.shape[0] > 1:
        order = np.argsort(flow.mesh[:, 0])
        vals = flow.values[:, :, order, 0]
        viol = int(np.count_nonzero(np.diff(vals, axis=-1) <= 0.0))
    return FlowPropertyReport(semigroup, jump_err, viol, int(p_idx.size))


def oracle_on_events(problem, events: EventGrid, mesh, nodes=None) -> tuple:
    """Closed-form flow values and left limits at padded nodes, shape (P, T, M, n)."""
    if problem.flow is None:
        raise ValueError(f"problem {problem.name!r} has no flow oracle")
    mesh = as_points(mesh, problem.model.dim_state)
    if nodes is None:
        nodes = np.arange(events.n_substeps + 1)
    nodes = np.asarray(nodes)
    t = events.times[:, nodes][..., None]
    w = events.W[:, nodes][:, :, None, :]
    c = events.counts(nodes)[:, :, None, :]
    cl = events.counts(nodes, left=True)[:, :, None, :]
    vals = problem.flow(t, mesh, w, c)
    left = problem.flow(t, mesh, w, cl)
    return vals, left
