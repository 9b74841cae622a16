"""Command-line experiment runner.

    bsipde [--config PATH] [--seed N] [--paths N] [--steps N] [--out-dir DIR]
           [--format csv|json] [--workers N] COMMAND ...

Commands: simulate, invert, bsde, compose, galerkin,
verify {wentzell,residual,energy,flow}, convergence, catalog.
Exit status 0 when every check passes, 1 when one fails, 2 on usage,
config or model errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import contextmanager

import numpy as np

from .bsde import (RegressionConfig, apriori_report, batch_evaluations, compare_to_oracle, oracle_solution,
                   oracle_triple, solve_batches, solve_bsde)
from .config import ConfigError, ExperimentConfig, load_config
from .convergence import fit_order
from .feynman_kac import (bsipde_residual, compose_batches, compose_solution, integrability_proxies,
                          oracle_triple_fields, pide_reference, triple_standard_errors, uniqueness_crosscheck)
from .galerkin import (StiffnessError, coercivity_probe, energy_convergence, energy_residual, fixed_point_iteration,
                       galerkin_system, heat_delta, solve_evolution)
from .galerkin import GALERKIN_SYSTEMS
from .inverse_flow import (NonInvertibleSampleError, StabilityError, UnsupportedDimensionError, UnsupportedModelError, check_nodes,
                           evaluate_inverse, integrate_inverse_backward_sde, integrate_inverse_sipde, inverse_identity,
                           invert_flow_grid)
from .ito_wentzell import WENTZELL_SPECS, wentzell_convergence
from .model import ModelError, UnknownProblemError, available_problems, catalog_problem
from .noise import NoiseError, TimeGrid, coarsen_noise, generate_ensemble
from .outputs import OutputError, RunSummary, Table, check_ge, check_le, check_order, emit_outputs
from .sde_flow import check_flow_properties, oracle_on_events, simulate_flow

COMMANDS = ("simulate", "invert", "bsde", "compose", "galerkin", "verify", "convergence", "catalog")
VERIFY_TARGETS = ("wentzell", "residual", "energy", "flow")

# errors that mean "bad input", reported without a traceback and exit status 2
USER_ERRORS = (ConfigError, UnknownProblemError, ModelError, StabilityError, StiffnessError,
               UnsupportedDimensionError, UnsupportedModelError, NonInvertibleSampleError, NoiseError, OutputError)


class Run:
    """Shared state of one command: config, problem, grid, noise, outputs."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.summary = RunSummary(command, cfg.seed)
        self.tables = []
        self._problem = None

    @property
    def problem(self):
        if self._problem is None:
            self._problem = catalog_problem(self.cfg.problem, **self.cfg.params)
        return self._problem

    @property
    def model(self):
        return self.problem.model

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.cfg.horizon or self.problem.horizon, self.cfg.steps)

    @property
    def reg(self) -> RegressionConfig:
        return RegressionConfig(**self.cfg["regression"])

    @property
    def table_paths(self) -> int:
        return self.cfg["output"]["table_paths"]

    def noise(self, grid: TimeGrid | None = None, paths: int | None = None, model=None):
        m = model or self.model
        return generate_ensemble(grid or self.grid, m.marks, self.cfg.seed, paths or self.cfg.paths, m.dim_brownian)

    def flow(self, noise, mesh):
        return simulate_flow(self.model, None, noise, mesh, record="base", workers=self.cfg.workers,
                             chunk=self.cfg.chunk)

    @contextmanager
    def timed(self, name: str):
        t0 = time.perf_counter()
        yield
        self.summary.timings[name] = self.summary.timings.get(name, 0.0) + time.perf_counter() - t0

    def table(self, name: str, columns: list) -> Table:
        t = Table(name, columns)
        self.tables.append(t)
        return t


def _mark_cols(prefix: str, count: int) -> list:
    return [prefix] if count == 1 else [f"{prefix}_{e}" for e in range(count)]


def _rms(a, mask=None) -> float:
    a = np.asarray(a, dtype=float)
    if mask is not None:
        m = np.broadcast_to(mask.reshape(mask.shape + (1,) * (a.ndim - mask.ndim)), a.shape)
        a = a[m]
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


# ---------------------------------------------------------------- simulate


def cmd_simulate(run: Run) -> None:
    cfg, model = run.cfg, run.model
    mesh = cfg.mesh("mesh").values()
    noise = run.noise()
    with run.timed("flow"):
        fl = run.flow(noise, mesh)
    n = model.dim_state
    cols = ["path_id", "t", "mesh_index", "x0"] + (["X", "X_left"] if n == 1 else
                                                   [f"X_{i}" for i in range(n)] + [f"X_left_{i}" for i in range(n)])
    tab = run.table("flow", cols)
    times = run.grid.nodes
    for p in range(min(run.table_paths, fl.events.n_paths)):
        pid = int(fl.events.path_ids[p])
        for k, t in enumerate(times):
            for m in range(mesh.size):
                tab.rows.append([pid, t, m, mesh[m], *fl.values[p, k, m], *fl.left[p, k, m]])
    with run.timed("properties"):
        sub = noise[: min(16, len(noise))]
        rep = check_flow_properties(model, None, sub, mesh, times[run.grid.steps // 2])
    tol = cfg.tol["flow"]
    run.summary.add(check_le("flow.semigroup", rep.semigroup_error, tol))
    run.summary.add(check_le("flow.jump_relation", rep.jump_relation_error, tol))
    if n == 1:
        run.summary.add(check_le("flow.monotonicity_violations", rep.monotonicity_violations, 0))
    if run.problem.flow is not None:
        ov, _ = oracle_on_events(run.problem, fl.events, mesh, nodes=[fl.events.n_substeps])
        run.summary.metrics["flow_terminal_rms_vs_oracle"] = _rms(fl.values[:, -1] - ov[:, 0])


# ---------------------------------------------------------------- invert


def _inverse_field(run: Run, noise, fl=None):
    cfg = run.cfg
    method = cfg["inverse"]["method"]
    if method == "grid":
        return invert_flow_grid(fl, cfg.mesh("query_mesh").values())
    if method == "sipde":
        return integrate_inverse_sipde(run.model, None, fl.events if fl is not None else noise,
                                       cfg.mesh("sipde_mesh").values(), record="base", band=cfg["inverse"]["band"],
                                       workers=cfg.workers, chunk=cfg.chunk)
    raise ConfigError("inverse.method: the backward construction yields point values, not a field; "
                      "use grid or sipde here")


def cmd_invert(run: Run) -> None:
    cfg, model = run.cfg, run.model
    method = cfg["inverse"]["method"]
    ys = cfg.mesh("query_mesh").values()
    noise = run.noise()
    g = run.grid
    rows = min(run.table_paths, len(noise))
    tab = run.table("inverse", ["path_id", "t", "y", "u", "method"])
    with run.timed("table"):
        if rows:
            head = noise[:rows]
            if method == "backward":
                nodes = check_nodes(g)
                u = integrate_inverse_backward_sde(model, None, head, ys, g.nodes[nodes])[..., 0]
            else:
                fl = run.flow(head, cfg.mesh("mesh").values()) if method == "grid" else None
                inv = _inverse_field(run, head, fl)
                nodes = np.arange(g.steps + 1)
                u = np.empty((rows, nodes.size, ys.size))
                for k in nodes:
                    # the grid inverse is stored on the query mesh itself
                    vals, fl_bad = evaluate_inverse(inv, int(k), np.broadcast_to(ys, (rows, ys.size)))
                    u[:, k] = np.where(fl_bad, np.nan, vals)
            for p in range(rows):
                for j, k in enumerate(nodes):
                    for q in range(ys.size):
                        if np.isfinite(u[p, j, q]):
                            tab.rows.append([head[p].path_id, g.nodes[k], ys[q], u[p, j, q], method])
    with run.timed("identity"):
        rep = inverse_identity(model, noise, ys, method, sipde_mesh=cfg.mesh("sipde_mesh").values()
                               if method == "sipde" else None, band=cfg["inverse"]["band"],
                               n_check=32 if method == "backward" else None, chunk=cfg.chunk, workers=cfg.workers)
    run.summary.metrics["identity"] = {"method": method, "rms": rep.rms, "max": rep.max, "count": rep.count}
    run.summary.add(check_le(f"inverse.identity.{method}", rep.rms, cfg.tol["identity"]))


# ---------------------------------------------------------------- bsde


def cmd_bsde(run: Run) -> None:
    cfg, model, prob = run.cfg, run.model, run.problem
    noise = run.noise()
    x0 = np.array([[cfg["x0"]]] if model.dim_state == 1 else [[cfg["x0"]] * model.dim_state])
    with run.timed("flow"):
        fl = run.flow(noise, x0)
    with run.timed("solve"):
        sol = solve_bsde(model, fl, config=run.reg)
        subs = solve_batches(model, fl, run.reg, cfg["batches"])
        evals = batch_evaluations(model, sol, subs)
    B = len(evals)
    d, E = model.dim_brownian, model.n_marks
    tab = run.table("bsde", ["t", "Y_mean", "Y_se"] + _mark_cols("Z_mean", d) + _mark_cols("U_mean", E))
    Ym = sol.Y[:, :, 0, 0].mean(axis=0)
    Yb = np.stack([e[0][:, :, 0, 0].mean(axis=0) for e in evals])
    Yse = Yb.std(axis=0, ddof=1) / np.sqrt(B)
    Zm = sol.Z[:, :, 0, 0].mean(axis=0)
    Um = sol.U[:, :, 0, 0].mean(axis=0)
    for k, t in enumerate(sol.times):
        tab.rows.append([t, Ym[k], Yse[k], *Zm[k], *Um[k]])
    stack = [np.stack([e[c] for e in evals]) for c in range(3)]
    se = tuple(s.std(axis=0, ddof=1) / np.sqrt(B) for s in stack)
    rep = apriori_report(sol, model)
    run.summary.metrics["Y0"] = float(Ym[0])
    run.summary.metrics["Y0_se"] = float(Yse[0])
    run.summary.metrics["apriori"] = rep.as_dict()
    run.summary.metrics["regression_condition_max"] = float(np.max(sol.condition))
    run.summary.add(check_ge("bsde.finite", float(sol.is_finite()), 1.0))
    run.summary.add(check_ge("bsde.apriori_finite", float(rep.passed), 1.0))
    if prob.bsde is not None:
        for c in compare_to_oracle(sol, oracle_triple(prob, sol), se, cfg.tol["sigmas"], cfg.tol["floor"]):
            run.summary.metrics[f"oracle_{c.component}"] = c.as_dict()
            run.summary.add(check_le(f"bsde.oracle.{c.component}", c.rms_error, c.tolerance))


# ---------------------------------------------------------------- compose


def _compose(run: Run, noise):
    cfg, model = run.cfg, run.model
    mesh = cfg.mesh("mesh").values()
    with run.timed("flow"):
        fl = run.flow(noise, mesh)
    with run.timed("solve"):
        sol = solve_bsde(model, fl, config=run.reg)
        evals = batch_evaluations(model, sol, solve_batches(model, fl, run.reg, cfg["batches"]))
    with run.timed("inverse"):
        inv = _inverse_field(run, noise, fl)
    with run.timed("compose"):
        tri = compose_solution(sol, fl, inv, model)
        se = triple_standard_errors(compose_batches(evals, sol, fl, inv, model))
    return fl, sol, evals, inv, tri, se


def _compose_checks(run: Run, fl, sol, inv, tri, se) -> None:
    cfg, model, prob = run.cfg, run.model, run.problem
    tol = cfg.tol
    v = tri.valid[:, :-1]
    if prob.field is not None:
        po, qo, ro = oracle_triple_fields(prob, tri)
        for name, est, ref, s in (("p", tri.p, po, se[0]), ("q", tri.q, qo, se[1]), ("r", tri.r, ro, se[2])):
            err = _rms(np.broadcast_to(est - ref, est.shape)[:, :-1], v)
            bound = tol["sigmas"] * _rms(s[:, :-1], v) + tol["floor"]
            run.summary.metrics[f"compose_{name}"] = {"rms_error": err, "tolerance": bound}
            run.summary.add(check_le(f"compose.oracle.{name}", err, bound))
    with run.timed("residual"):
        run.summary.metrics["residual"] = bsipde_residual(tri, model, band=2).as_dict()
        if prob.bsde is not None:
            # sensitivity: closed-form family through the same flow and inverse, so the
            # baseline is discretization error only; regression noise would mask the shift
            ref = compose_solution(oracle_solution(prob, fl), fl, inv, model)
            base = bsipde_residual(ref, model, band=2)
            pert = bsipde_residual(ref.with_p(ref.p + 0.1 * np.sin(ref.mesh)[None, None, :, None]), model, band=2)
            run.summary.metrics["residual_closed_form"] = base.as_dict()
            run.summary.metrics["residual_perturbed"] = pert.as_dict()
            if pert.rms == 0.0:
                # every time-constant field solves a coefficient-free problem; nothing to reject
                run.summary.metrics["residual_rejection"] = "not applicable"
            else:
                ratio = pert.rms / base.rms if base.rms > 0 else float("inf")
                run.summary.add(check_ge("residual.perturbed_rejection", ratio, tol["rejection"]))
    cr = uniqueness_crosscheck(tri, fl, sol)
    run.summary.metrics["uniqueness"] = cr.as_dict()
    run.summary.metrics["integrability"] = integrability_proxies(tri, model)


def cmd_compose(run: Run) -> None:
    noise = run.noise()
    fl, sol, evals, inv, tri, se = _compose(run, noise)
    d, E = tri.q.shape[-1], tri.r.shape[-1]
    tab = run.table("fields", ["t", "x"] + ["p"] + _mark_cols("q", d) + _mark_cols("r", E) + ["path_id"])
    for p in range(min(run.table_paths, tri.p.shape[0])):
        pid = int(tri.path_ids[p])
        for k, t in enumerate(tri.times):
            for j, x in enumerate(tri.mesh):
                if tri.valid[p, k, j]:
                    tab.rows.append([t, x, tri.p[p, k, j, 0], *tri.q[p, k, j, 0], *tri.r[p, k, j, 0], pid])
    _compose_checks(run, fl, sol, inv, tri, se)


# ---------------------------------------------------------------- galerkin


def _galerkin_defaults(system, gcfg: dict) -> tuple:
    alpha = gcfg["alpha"]
    if alpha is None:
        alpha = max(heat_delta(system), 0.0) if system.name.startswith("heat") else 0.0
    lam = gcfg["lam"]
    if lam is None:
        lam = max(float(alpha), 1.0)
    return float(lam), float(alpha)


def cmd_galerkin(run: Run) -> None:
    cfg = run.cfg
    gcfg = cfg["galerkin"]
    system = galerkin_system(gcfg["system"], **gcfg["params"])
    grid = TimeGrid(cfg.horizon or 1.0, cfg.steps)
    noise = run.noise(grid, model=system)
    with run.timed("solve"):
        path = solve_evolution(system, None, noise, workers=cfg.workers, chunk=cfg.chunk)
        rep = energy_residual(system, path)
    lam, alpha = _galerkin_defaults(system, gcfg)
    probe = coercivity_probe(system, lam, alpha)
    with run.timed("fixed_point"):
        fp = fixed_point_iteration(system, noise[: min(16, len(noise))])
    tab = run.table("galerkin", ["path_id", "t", "norm"] + [f"c_{i}" for i in range(system.size)])
    base = path.events.base_nodes
    for p in range(min(run.table_paths, path.values.shape[0])):
        for k, t in enumerate(grid.nodes):
            kk = base[k]
            tab.rows.append([int(path.events.path_ids[p]), t, path.norms[p, kk], *path.values[p, kk]])
    run.summary.metrics["energy"] = rep.as_dict()
    run.summary.metrics["coercivity"] = probe.as_dict()
    run.summary.metrics["fixed_point"] = {"increments": fp.increments, "factors": fp.factors}
    run.summary.add(check_ge("galerkin.coercivity_slack", probe.min_slack, -1e-10))
    if system.name == "zero":
        run.summary.add(check_le("galerkin.energy_exact", rep.max, 1e-6))


# ---------------------------------------------------------------- verify


def verify_wentzell(run: Run) -> None:
    cfg = run.cfg
    tab = run.table("wentzell", ["spec", "level", "steps", "dt", "rms", "max"])
    out = {}
    for name in cfg["wentzell"]["specs"]:
        factory, use_oracle = WENTZELL_SPECS[name]
        spec = factory()
        grid = TimeGrid(cfg.horizon or spec.process.horizon, cfg.steps)
        bundles = run.noise(grid, model=spec.model)
        with run.timed(f"wentzell.{name}"):
            fit, reps = wentzell_convergence(spec, bundles, cfg.levels, use_oracle)
        for i, (dt, r) in enumerate(zip(fit.dts, reps)):
            tab.rows.append([name, i, int(round(grid.horizon / dt)), dt, r.rms, r.max])
        out[name] = {"max": max(r.max for r in reps), "rms": reps[0].rms, "fit": fit.as_dict()}
        run.summary.slopes[f"wentzell.{name}"] = fit.slope
        if name == "static-identity":
            run.summary.add(check_le(f"wentzell.{name}.exact", out[name]["max"], cfg.tol["exact"]))
        else:
            run.summary.add(check_order(f"wentzell.{name}.order", fit, cfg.tol["order"]))
    run.summary.metrics["wentzell"] = out


def _residual_levels(run: Run, noise_fine, mesh, qmesh) -> tuple:
    """Residual RMS of the closed-form family composed with the grid inverse, per level."""
    model, prob = run.model, run.problem
    dts, errs = [], []
    for i in range(run.cfg.levels):
        nz = [coarsen_noise(b, 2**i) for b in noise_fine]
        fl = simulate_flow(model, None, nz, mesh, record="base", workers=run.cfg.workers, chunk=run.cfg.chunk)
        tri = compose_solution(oracle_solution(prob, fl), fl, invert_flow_grid(fl, qmesh), model)
        dts.append(nz[0].grid.dt)
        errs.append(bsipde_residual(tri, model).rms)
    return dts, errs


def _pide_steps(model, horizon: float, mesh, start: int) -> tuple:
    """Smallest dyadic multiple of ``start`` steps at which the explicit PIDE scheme is stable."""
    steps = start
    while True:
        g = TimeGrid(horizon, steps)
        try:
            return g, pide_reference(model, g, mesh)
        except StabilityError:
            if steps >= 2**16:
                raise
            steps *= 2


def verify_residual(run: Run) -> None:
    cfg, model, prob = run.cfg, run.model, run.problem
    tol = cfg.tol
    mesh = cfg.mesh("mesh").values()
    qmesh = cfg.mesh("query_mesh").values()
    noise = run.noise()
    tab = run.table("residual", ["level", "steps", "dt", "rms"])
    if prob.bsde is not None:
        with run.timed("residual_order"):
            dts, errs = _residual_levels(run, noise, mesh, qmesh)
        fit = fit_order(dts, errs)
        for i, (dt, e) in enumerate(zip(dts, errs)):
            tab.rows.append([i, int(round(run.grid.horizon / dt)), dt, e])
        run.summary.slopes["residual"] = fit.slope
        run.summary.add(check_order("residual.order", fit, tol["order"]))
    fl, sol, evals, inv, tri, se = _compose(run, noise)
    _compose_checks(run, fl, sol, inv, tri, se)
    # PIDE cross-check of Y_0 on initial points inside the PIDE mesh interior
    pmesh = np.linspace(qmesh[0], qmesh[-1], 4 * (qmesh.size - 1) + 1)
    with run.timed("pide"):
        pg, pf = _pide_steps(model, run.grid.horizon, pmesh, run.grid.steps)
    xi = mesh
    inside = (xi > pmesh[2]) & (xi < pmesh[-3])
    if inside.any():
        y0 = sol.Y[0, 0, inside, 0]
        pv = np.interp(xi[inside], pf.mesh, pf.values[0, :, 0])
        yb = np.stack([e[0][0, 0, inside, 0] for e in evals])
        se0 = yb.std(axis=0, ddof=1) / np.sqrt(len(evals))
        bound = tol["sigmas"] * se0 + tol["floor"]
        worst = float(np.max(np.abs(y0 - pv) / bound))
        run.summary.metrics["pide"] = {"steps": pg.steps, "points": int(inside.sum()),
                                       "max_abs": float(np.max(np.abs(y0 - pv)))}
        run.summary.add(check_le("residual.pide_crosscheck", worst, 1.0))


def verify_energy(run: Run) -> None:
    cfg = run.cfg
    gcfg = cfg["galerkin"]
    system = galerkin_system(gcfg["system"], **gcfg["params"])
    grid = TimeGrid(cfg.horizon or 1.0, cfg.steps)
    noise = run.noise(grid, model=system)
    with run.timed("energy"):
        fit = energy_convergence(system, noise, cfg.levels)
    tab = run.table("energy", ["level", "steps", "dt", "rms"])
    for i, (dt, e) in enumerate(zip(fit.dts, fit.errors)):
        tab.rows.append([i, int(round(grid.horizon / dt)), dt, e])
    run.summary.slopes[f"energy.{system.name}"] = fit.slope
    if system.name == "zero":
        run.summary.add(check_le("energy.zero_exact", float(np.max(fit.errors)), 1e-6))
    else:
        run.summary.add(check_order(f"energy.{system.name}.order", fit, cfg.tol["order"]))


def _flow_study(run: Run, noise, mesh) -> tuple:
    dts, errs = [], []
    for i in range(run.cfg.levels):
        nz = [coarsen_noise(b, 2**i) for b in noise]
        fl = run.flow(nz, mesh)
        ov, _ = oracle_on_events(run.problem, fl.events, mesh, nodes=[fl.events.n_substeps])
        dts.append(nz[0].grid.dt)
        errs.append(_rms(fl.values[:, -1] - ov[:, 0]))
    return dts, errs


def verify_flow(run: Run) -> None:
    cfg, model = run.cfg, run.model
    mesh = cfg.mesh("mesh").values()
    noise = run.noise()
    g = run.grid
    with run.timed("properties"):
        rep = check_flow_properties(model, None, noise[: min(16, len(noise))], mesh, g.nodes[g.steps // 2])
    run.summary.metrics["flow_properties"] = rep.as_dict()
    run.summary.add(check_le("flow.semigroup", rep.semigroup_error, cfg.tol["flow"]))
    run.summary.add(check_le("flow.jump_relation", rep.jump_relation_error, cfg.tol["flow"]))
    if model.dim_state == 1:
        run.summary.add(check_le("flow.monotonicity_violations", rep.monotonicity_violations, 0))
    if run.problem.flow is not None:
        with run.timed("strong_order"):
            dts, errs = _flow_study(run, noise, mesh)
        fit = fit_order(dts, errs)
        tab = run.table("flow_convergence", ["level", "steps", "dt", "rms"])
        for i, (dt, e) in enumerate(zip(dts, errs)):
            tab.rows.append([i, int(round(g.horizon / dt)), dt, e])
        run.summary.slopes["flow.strong"] = fit.slope
        run.summary.add(check_order("flow.strong_order", fit, cfg.tol["order"]))


VERIFY = {"wentzell": verify_wentzell, "residual": verify_residual, "energy": verify_energy, "flow": verify_flow}


# ---------------------------------------------------------------- convergence


def cmd_convergence(run: Run) -> None:
    cfg, model = run.cfg, run.model
    method = cfg["inverse"]["method"]
    noise = run.noise()
    g = run.grid
    tab = run.table("convergence", ["study", "level", "steps", "dt", "error"])
    studies = {}
    if run.problem.flow is not None:
        with run.timed("flow"):
            studies["flow"] = _flow_study(run, noise, cfg.mesh("mesh").values())
    ys = cfg.mesh("query_mesh").values()
    dts, errs = [], []
    with run.timed("inverse"):
        for i in range(cfg.levels):
            nz = [coarsen_noise(b, 2**i) for b in noise]
            rep = inverse_identity(model, nz, ys, method,
                                   sipde_mesh=cfg.mesh("sipde_mesh").values() if method == "sipde" else None,
                                   band=cfg["inverse"]["band"], n_check=32 if method == "backward" else None,
                                   chunk=cfg.chunk, workers=cfg.workers)
            dts.append(nz[0].grid.dt)
            errs.append(rep.rms)
    studies[f"inverse.{method}"] = (dts, errs)
    for name, (dts, errs) in studies.items():
        for i, (dt, e) in enumerate(zip(dts, errs)):
            tab.rows.append([name, i, int(round(g.horizon / dt)), dt, e])
        fit = fit_order(dts, errs)
        run.summary.slopes[name] = fit.slope
        run.summary.add(check_order(f"convergence.{name}", fit, cfg.tol["order"]))


# ---------------------------------------------------------------- catalog


def cmd_catalog(run: Run) -> None:
    tab = run.table("catalog", ["kind", "name", "params", "oracles"])
    for name in available_problems():
        p = catalog_problem(name)
        oracles = [k for k in ("flow", "inverse_flow", "bsde", "field") if getattr(p, k) is not None]
        tab.rows.append(["problem", name, json.dumps(dict(p.params), sort_keys=True), " ".join(oracles)])
    for name in GALERKIN_SYSTEMS:
        tab.rows.append(["galerkin", name, "{}", ""])
    for name in sorted(WENTZELL_SPECS):
        tab.rows.append(["wentzell", name, "{}", "closed_form"])


COMMAND_FUNCS = {"simulate": cmd_simulate, "invert": cmd_invert, "bsde": cmd_bsde, "compose": cmd_compose,
                 "galerkin": cmd_galerkin, "convergence": cmd_convergence, "catalog": cmd_catalog}


def run_experiment(config: ExperimentConfig, command: str, target: str | None = None, write: bool = True) -> tuple:
    """Execute one command; returns (RunSummary, tables). Writes outputs unless ``write`` is False."""
    if command == "verify":
        if target not in VERIFY:
            raise ConfigError(f"verify: target must be one of {', '.join(VERIFY_TARGETS)}")
        name = f"verify-{target}"
        fn = VERIFY[target]
    elif command in COMMAND_FUNCS:
        name, fn = command, COMMAND_FUNCS[command]
    else:
        raise ConfigError(f"unknown command {command!r}")
    run = Run(config, name)
    t0 = time.perf_counter()
    fn(run)
    run.summary.timings["total"] = time.perf_counter() - t0
    if write:
        emit_outputs(run.summary, run.tables, config.out_dir, config.format, config)
    return run.summary, run.tables


# ---------------------------------------------------------------- argparse


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=d, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=d, help="master seed")
    parser.add_argument("--paths", type=int, default=d, help="number of noise paths")
    parser.add_argument("--steps", type=int, default=d, help="base time steps")
    parser.add_argument("--out-dir", metavar="DIR", default=d, help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default=d, help="table format")
    parser.add_argument("--workers", type=int, default=d, help="worker threads (results do not depend on it)")
    parser.add_argument("--problem", default=d, help="catalog problem name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsipde", description="Jump BSDE, inverse flow and BSIPDE experiments.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    helps = {
        "simulate": "simulate the stochastic flow over the initial mesh",
        "invert": "build the inverse flow and check u(t, X_t(x)) = x",
        "bsde": "solve the BSDE from x0 by regression",
        "compose": "compose BSDE and inverse flow into (p, q, r)",
        "galerkin": "solve a Galerkin system and probe its energy identity",
        "verify": "run a verification study",
        "convergence": "dyadic refinement study on nested noise",
        "catalog": "list catalog problems, Galerkin systems and field specs",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        _global_flags(sp, suppress=True)
        if name == "verify":
            sp.add_argument("target", choices=VERIFY_TARGETS)
        if name in ("invert", "compose", "convergence", "verify"):
            sp.add_argument("--method", choices=("grid", "sipde", "backward"), default=argparse.SUPPRESS,
                            help="inverse-flow construction")
        if name == "galerkin" or name == "verify":
            sp.add_argument("--system", choices=GALERKIN_SYSTEMS, default=argparse.SUPPRESS,
                            help="Galerkin system")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    flags = {
        "seed": getattr(args, "seed", None),
        "paths": getattr(args, "paths", None),
        "grid.steps": getattr(args, "steps", None),
        "output.dir": getattr(args, "out_dir", None),
        "output.format": getattr(args, "format", None),
        "workers": getattr(args, "workers", None),
        "problem.name": getattr(args, "problem", None),
        "inverse.method": getattr(args, "method", None),
        "galerkin.system": getattr(args, "system", None),
    }
    if flags["problem.name"] is not None and flags["problem.name"] != cfg.problem:
        # parameters belong to the configured problem, not the one named on the command line
        raw = dict(cfg.raw)
        raw["problem"] = {"name": flags.pop("problem.name"), "params": {}}
        cfg = ExperimentConfig(raw)
    return cfg.override(**flags)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    try:
        cfg = config_from_args(args)
        summary, _ = run_experiment(cfg, args.command, getattr(args, "target", None))
    except USER_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"bsipde: error: {msg}", file=sys.stderr)
        return 2
    for c in summary.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: {c.statistic:.4g} {c.kind} {c.tolerance:.4g}")
    print(f"{'passed' if summary.passed else 'failed'}: {sum(c.passed for c in summary.checks)}/"
          f"{len(summary.checks)} checks; outputs in {cfg.out_dir}")
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
