"""Pathwise check of the jump Ito-Wentzell formula.

A random field F(t, x) = F0(x) + int G ds + int H dW + int J dN~ is composed
with a jump diffusion X. The left side F(t, X_t) is evaluated directly; the
right side is the sum of every discretized term of the expansion with
left-point integrands on the jump-adapted grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .convergence import OrderFit, fit_order
from .model import CoefficientModel, TestProblem, catalog_problem
from .noise import EventGrid, NoiseBundle, TimeGrid, coarsen_noise
from .sde_flow import _events_for, integrate_flow, oracle_on_events

FD_H = 1e-4


@dataclass
class SemimartingaleFieldSpec:
    """Field data. Callables take (t, x, w) with w = W_t; J also takes the mark.

    ``closed_form(t, x, w, counts)`` must equal the discrete reconstruction
    F0 + sum G dt + sum H dW + sum J dN~ on the grid it is checked on.
    """

    name: str
    F0: Callable
    G: Callable
    H: Callable
    J: Callable
    closed_form: Callable
    process: TestProblem
    x0: np.ndarray
    F_dx: Callable | None = None  # (t, x, w, counts) -> (..., n)
    F_dxx: Callable | None = None  # (..., n, n)
    H_dx: Callable | None = None  # (t, x, w) -> (..., d, n)
    J_is_zero: bool = False

    @property
    def model(self) -> CoefficientModel:
        return self.process.model


def _fd_grad(fn, x, h=FD_H):
    n = x.shape[-1]
    out = np.empty(x.shape)
    for i in range(n):
        s = np.zeros(n)
        s[i] = h
        out[..., i] = (fn(x + s) - fn(x - s)) / (2 * h)
    return out


def _fd_hess(fn, x, h=FD_H):
    n = x.shape[-1]
    out = np.empty(x.shape + (n,))
    f0 = fn(x)
    for i in range(n):
        si = np.zeros(n)
        si[i] = h
        out[..., i, i] = (fn(x + si) - 2 * f0 + fn(x - si)) / (h * h)
        for j in range(i + 1, n):
            sj = np.zeros(n)
            sj[j] = h
            v = (fn(x + si + sj) - fn(x + si - sj) - fn(x - si + sj) + fn(x - si - sj)) / (4 * h * h)
            out[..., i, j] = v
            out[..., j, i] = v
    return out


def field_derivatives(spec: SemimartingaleFieldSpec, t, x, w, counts) -> tuple:
    F = lambda z: spec.closed_form(t, z, w, counts)
    dF = spec.F_dx(t, x, w, counts) if spec.F_dx is not None else _fd_grad(F, x)
    d2F = spec.F_dxx(t, x, w, counts) if spec.F_dxx is not None else _fd_hess(F, x)
    return np.asarray(dF, dtype=float), np.asarray(d2F, dtype=float)


def _h_jacobian(spec, t, x, w):
    if spec.H_dx is not None:
        return np.asarray(spec.H_dx(t, x, w), dtype=float)
    d = spec.model.dim_brownian
    n = x.shape[-1]
    out = np.empty(x.shape[:-1] + (d, n))
    for i in range(n):
        s = np.zeros(n)
        s[i] = FD_H
        out[..., :, i] = (spec.H(t, x + s, w) - spec.H(t, x - s, w)) / (2 * FD_H)
    return out


@dataclass
class WentzellReport:
    name: str
    per_path_max: np.ndarray = field(repr=False)
    rms: float = 0.0
    max: float = 0.0
    jump_consistency: float = 0.0
    n_jumps: int = 0

    def as_dict(self) -> dict:
        return {"name": self.name, "rms": self.rms, "max": self.max,
                "jump_consistency": self.jump_consistency, "n_jumps": self.n_jumps}


def verify_wentzell(spec: SemimartingaleFieldSpec, grid: TimeGrid | None, noise, use_oracle_state: bool = False) -> WentzellReport:
    """Discrepancy between both sides of the formula at every node of every path."""
    ev = _events_for(noise)
    model = spec.model
    n, d = model.dim_state, model.dim_brownian
    x0 = np.asarray(spec.x0, dtype=float).reshape(1, n)
    if use_oracle_state:
        X, Xl = oracle_on_events(spec.process, ev, x0)
    else:
        X, Xl = integrate_flow(model, ev, x0)
    X, Xl = X[:, :, 0], Xl[:, :, 0]  # (P, K+1, n)
    P, K = ev.n_paths, ev.n_substeps
    counts = ev.counts()
    counts_left = ev.counts(left=True)
    rates = model.marks.rates
    E = model.n_marks

    lhs = spec.closed_form(ev.times, X, ev.W, counts)
    rhs = np.empty((P, K + 1))
    rhs[:, 0] = spec.closed_form(ev.times[:, 0], X[:, 0], ev.W[:, 0], counts[:, 0])
    jump_err = 0.0
    n_jumps = 0
    for k in range(K):
        t, x, w, c = ev.times[:, k], X[:, k], ev.W[:, k], counts[:, k]
        dt, dW = ev.dt[:, k], ev.dW[:, k]
        inc = np.zeros(P)
        if np.any(dt > 0.0):
            tt = t[:, None]
            b = np.asarray(model.drift(tt, x), dtype=float)
            sig = np.asarray(model.diffusion(tt, x), dtype=float)  # (P, n, d)
            dF, d2F = field_derivatives(spec, t, x, w, c)
            Fx = spec.closed_form(t, x, w, c)
            H = spec.H(t, x, w)  # (P, d)
            dH = _h_jacobian(spec, t, x, w)  # (P, d, n)
            a = np.einsum("pir,pjr->pij", sig, sig)
            drift_terms = (
                spec.G(t, x, w)
                + np.sum(dF * b, axis=-1)
                + 0.5 * np.sum(d2F * a, axis=(-1, -2))
                + np.einsum("pri,pir->p", dH, sig)
            )
            for e in range(E):
                g = model.jump_coeff(tt, e, x)
                Fg = spec.closed_form(t, x + g, w, c)
                Jg = spec.J(t, e, x + g, w)
                Jx = spec.J(t, e, x, w)
                # compensator of the field's own jump part, the jump correction
                # of the expansion, and the compensator of its dN~ term
                drift_terms = drift_terms - rates[e] * Jx
                drift_terms = drift_terms + rates[e] * (Fg - Fx - np.sum(dF * g, axis=-1) + Jg - Jx)
                drift_terms = drift_terms - rates[e] * (Fg - Fx + Jg)
            mart = np.zeros(P)
            for r in range(d):
                mart = mart + (H[:, r] + np.sum(dF * sig[..., r], axis=-1)) * dW[:, r]
            inc = drift_terms * dt + mart
            inc = np.where(dt > 0.0, inc, 0.0)
        rhs[:, k + 1] = rhs[:, k] + inc
        mk = ev.marks[:, k]
        rows = np.nonzero(mk >= 0)[0]
        if rows.size:
            t1 = ev.times[rows, k + 1]
            xl = Xl[rows, k + 1]
            w1 = ev.W[rows, k + 1]
            cl = counts_left[rows, k + 1]
            jinc = np.empty(rows.size)
            for e in np.unique(mk[rows]):
                sel = np.nonzero(mk[rows] == e)[0]
                g = model.jump_coeff(t1[sel][:, None], int(e), xl[sel])
                xg = xl[sel] + g
                jinc[sel] = (
                    spec.closed_form(t1[sel], xg, w1[sel], cl[sel])
                    - spec.closed_form(t1[sel], xl[sel], w1[sel], cl[sel])
                    + spec.J(t1[sel], int(e), xg, w1[sel])
                )
                # the jump of F(t, X_t) itself: F(t, X_t) - F(t-, X_t-)
                after = spec.closed_form(t1[sel], X[rows[sel], k + 1], w1[sel], counts[rows[sel], k + 1])
                before = spec.closed_form(t1[sel], xl[sel], w1[sel], cl[sel])
                jump_err = max(jump_err, float(np.max(np.abs((after - before) - jinc[sel]))))
            rhs[rows, k + 1] += jinc
            n_jumps += rows.size
    diff = np.abs(lhs - rhs)
    if not np.all(np.isfinite(diff)):
        p = int(np.nonzero(~np.isfinite(diff).all(axis=1))[0][0])
        raise FloatingPointError(f"non-finite term in the expansion on path {ev.path_ids[p]}")
    per_path = diff.max(axis=1)
    return WentzellReport(spec.name, per_path, float(np.sqrt(np.mean(per_path**2))), float(per_path.max()),
                          jump_err, n_jumps)


def reconstruction_defect(spec: SemimartingaleFieldSpec, noise, points, nodes=None) -> float:
    """Max gap between ``closed_form`` and the discrete sum defining F."""
    ev = _events_for(noise)
    pts = np.asarray(points, dtype=float).reshape(-1, spec.model.dim_state)
    P, K = ev.n_paths, ev.n_substeps
    if nodes is None:
        nodes = np.asarray(ev.base_nodes)
    rates = spec.model.marks.rates
    F = np.broadcast_to(spec.F0(pts), (P, pts.shape[0])).copy()
    counts = ev.counts()
    worst = 0.0
    want = set(int(v) for v in nodes)
    if 0 in want:
        ref = spec.closed_form(ev.times[:, 0, None], pts[None], ev.W[:, 0, None], counts[:, 0, None])
        worst = max(worst, float(np.max(np.abs(ref - F))))
    for k in range(K):
        t = ev.times[:, k, None]
        w = ev.W[:, k, None]
        inc = spec.G(t, pts[None], w) * ev.dt[:, k, None]
        H = spec.H(t, pts[None], w)
        for r in range(H.shape[-1]):
            inc = inc + H[..., r] * ev.dW[:, k, r, None]
        for e in range(spec.model.n_marks):
            inc = inc - rates[e] * spec.J(t, e, pts[None], w) * ev.dt[:, k, None]
        F = F + np.where(ev.dt[:, k, None] > 0.0, inc, 0.0)
        mk = ev.marks[:, k]
        for p in np.nonzero(mk >= 0)[0]:
            F[p] = F[p] + spec.J(ev.times[p, k + 1], int(mk[p]), pts, ev.W[p, k + 1])
        if k + 1 in want:
            ref = spec.closed_form(ev.times[:, k + 1, None], pts[None], ev.W[:, k + 1, None], counts[:, k + 1, None])
            worst = max(worst, float(np.max(np.abs(ref - F))))
    return worst


def smoothness_probe(spec: SemimartingaleFieldSpec, n_samples: int = 64, seed: int = 0) -> float:
    """Continuity probe of the first derivative: gap of FD gradients at steps h and h/2."""
    rng = np.random.default_rng(seed)
    n, d, E = spec.model.dim_state, spec.model.dim_brownian, spec.model.n_marks
    t = rng.random(n_samples)
    x = rng.uniform(0.5, 1.5, (n_samples, n))
    w = rng.standard_normal((n_samples, d))
    c = rng.poisson(1.0, (n_samples, E))
    F = lambda z: spec.closed_form(t, z, w, c)
    return float(np.max(np.abs(_fd_grad(F, x, 1e-3) - _fd_grad(F, x, 5e-4))))


# ---------------------------------------------------------------- test specs


def _zero_t(t, x, w):
    return np.zeros(np.shape(x)[:-1])


def _zero_j(t, e, x, w):
    return np.zeros(np.shape(x)[:-1])


def static_identity_spec(process: TestProblem | None = None, x0: float = 1.0) -> SemimartingaleFieldSpec:
    """F(t, x) = x."""
    proc = process or catalog_problem("linear-jump-diffusion")
    d = proc.model.dim_brownian
    return SemimartingaleFieldSpec(
        "static-identity",
        F0=lambda x: np.asarray(x)[..., 0],
        G=_zero_t,
        H=lambda t, x, w: np.zeros(np.shape(x)[:-1] + (d,)),
        J=_zero_j,
        closed_form=lambda t, x, w, c: np.asarray(x)[..., 0],
        process=proc,
        x0=np.array([x0]),
        F_dx=lambda t, x, w, c: np.ones(np.shape(x)),
        F_dxx=lambda t, x, w, c: np.zeros(np.shape(x) + (np.shape(x)[-1],)),
        H_dx=lambda t, x, w: np.zeros(np.shape(x)[:-1] + (d, np.shape(x)[-1])),
        J_is_zero=True,
    )


def brownian_product_spec(process: TestProblem | None = None, x0: float = 1.0) -> SemimartingaleFieldSpec:
    """F(t, x) = W^1_t x, so H = (x, 0, ...)."""
    proc = process or catalog_problem("linear-jump-diffusion")
    d = proc.model.dim_brownian

    def H(t, x, w):
        out = np.zeros(np.shape(x)[:-1] + (d,))
        out[..., 0] = np.asarray(x)[..., 0]
        return out

    def H_dx(t, x, w):
        out = np.zeros(np.shape(x)[:-1] + (d, np.shape(x)[-1]))
        out[..., 0, 0] = 1.0
        return out

    def F(t, x, w, c):
        return np.asarray(x)[..., 0] * np.asarray(w)[..., 0]

    def F_dx(t, x, w, c):
        out = np.zeros(np.shape(x))
        out[..., 0] = np.broadcast_to(np.asarray(w)[..., 0], np.shape(x)[:-1])
        return out

    return SemimartingaleFieldSpec(
        "brownian-product",
        F0=lambda x: np.zeros(np.shape(x)[:-1]),
        G=_zero_t,
        H=H,
        J=_zero_j,
        closed_form=F,
        process=proc,
        x0=np.array([x0]),
        F_dx=F_dx,
        F_dxx=lambda t, x, w, c: np.zeros(np.shape(x) + (np.shape(x)[-1],)),
        H_dx=H_dx,
        J_is_zero=True,
    )


def static_square_spec(process: TestProblem | None = None, x0: float = 1.0) -> SemimartingaleFieldSpec:
    """F(t, x) = x^2 with no time dependence; derivatives by finite differences."""
    proc = process or catalog_problem("linear-jump-diffusion")
    d = proc.model.dim_brownian
    return SemimartingaleFieldSpec(
        "static-square",
        F0=lambda x: np.asarray(x)[..., 0] ** 2,
        G=_zero_t,
        H=lambda t, x, w: np.zeros(np.shape(x)[:-1] + (d,)),
        J=_zero_j,
        closed_form=lambda t, x, w, c: np.asarray(x)[..., 0] ** 2,
        process=proc,
        x0=np.array([x0]),
        J_is_zero=True,
    )


WENTZELL_SPECS = {
    "static-identity": (static_identity_spec, False),
    "brownian-product": (brownian_product_spec, False),
    "static-square": (static_square_spec, True),  # X from the closed-form flow
}


def wentzell_convergence(spec: SemimartingaleFieldSpec, bundles, levels: int = 4, use_oracle_state: bool = False) -> tuple:
    """Refinement study on nested noise. Returns (OrderFit, list of reports)."""
    dts, errs, reports = [], [], []
    for i in range(levels):
        f = 2**i
        coarse = [coarsen_noise(b, f) for b in bundles]
        rep = verify_wentzell(spec, None, coarse, use_oracle_state=use_oracle_state)
        dts.append(coarse[0].grid.dt)
        errs.append(rep.rms)
        reports.append(rep)
    return fit_order(dts, errs), reports
