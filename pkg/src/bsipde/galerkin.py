"""Galerkin approximation of a linear jump evolution equation.

The equation is du = A u dt + int Atil u v(de) dt + B u dW + int Atil u(t-) N~(de dt)
on a finite basis. Operators enter through their forms on the basis,
``A_form[i, j] = <A nu_j, nu_i>``, and the Gram matrices of the H and V inner
products. The coefficient SDE is then
dg = G^{-1} A_form g dt + G^{-1} B_form g dW + jumps g <- g + G^{-1} Atil_form g,
where the v-weighted drift and the compensator of the N~ term cancel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .convergence import fit_order
from .model import MarkSpace
from .noise import EventGrid, TimeGrid, coarsen_noise
from .sde_flow import _events_for, run_chunks, DEFAULT_CHUNK


class StiffnessError(ValueError):
    def __init__(self, msg, suggested_dt):
        super().__init__(msg)
        self.suggested_dt = suggested_dt


class GramError(ValueError):
    pass


def _mat(m, t):
    return np.asarray(m(t) if callable(m) else m, dtype=float)


@dataclass
class EvolutionSystem:
    name: str
    gram_H: np.ndarray
    gram_V: np.ndarray
    A_form: np.ndarray | Callable
    B_forms: list  # d entries, each (n, n) or callable of t
    Atil_forms: list  # E entries
    marks: MarkSpace
    u0_inner: np.ndarray  # (u_0, nu_i)_H

    def __post_init__(self):
        for label in ("gram_H", "gram_V"):
            g = np.asarray(getattr(self, label), dtype=float)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise GramError(f"{label} must be square")
            if not np.allclose(g, g.T, rtol=0, atol=1e-12 * max(1.0, np.abs(g).max())):
                raise GramError(f"{label} is not symmetric")
            try:
                np.linalg.cholesky(g)
            except np.linalg.LinAlgError:
                raise GramError(f"{label} is not positive definite") from None
            setattr(self, label, g)
        if len(self.Atil_forms) != self.marks.size:
            raise ValueError("one Atil form per mark is required")
        self.u0_inner = np.asarray(self.u0_inner, dtype=float)
        if not self.is_constant:
            return
        for m in [self.A_form, *self.B_forms, *self.Atil_forms]:
            if not np.all(np.isfinite(m)):
                raise ValueError(f"non-finite operator matrix in system {self.name!r}")

    @property
    def size(self) -> int:
        return self.gram_H.shape[0]

    @property
    def dim_brownian(self) -> int:
        return len(self.B_forms)

    @property
    def is_constant(self) -> bool:
        return not any(callable(m) for m in [self.A_form, *self.B_forms, *self.Atil_forms])

    def initial(self) -> np.ndarray:
        """Coefficients of the H-projection of u_0."""
        return np.linalg.solve(self.gram_H, self.u0_inner)

    def matrices(self, t: float = 0.0) -> tuple:
        """Coefficient-space matrices (drift, diffusion stack, jump stack) at time t."""
        G = self.gram_H
        A = np.linalg.solve(G, _mat(self.A_form, t))
        B = np.stack([np.linalg.solve(G, _mat(b, t)) for b in self.B_forms]) if self.B_forms else np.zeros((0, self.size, self.size))
        J = np.stack([np.linalg.solve(G, _mat(a, t)) for a in self.Atil_forms])
        return A, B, J

    def scaled(self, kappa: float) -> "EvolutionSystem":
        return EvolutionSystem(self.name, self.gram_H, self.gram_V, self.A_form, self.B_forms, self.Atil_forms,
                               self.marks, kappa * self.u0_inner)


@dataclass
class GalerkinPath:
    events: EventGrid
    values: np.ndarray  # (P, K+1, n)
    left: np.ndarray  # (P, K+1, n)
    norms: np.ndarray = None  # (P, K+1) squared H-norms

    @property
    def times(self) -> np.ndarray:
        return self.events.times


def _stiffness_guard(A: np.ndarray, dt: float) -> None:
    ev = np.linalg.eigvals(A)
    # explicit Euler is stable for eigenvalue z when |1 + z dt| <= 1,
    # i.e. dt <= -2 Re z / |z|^2 for Re z < 0
    neg = ev.real < 0
    if np.any(neg):
        lim = float(np.min(-2.0 * ev.real[neg] / np.abs(ev[neg]) ** 2))
        if dt > lim * (1 + 1e-12):
            raise StiffnessError(
                f"explicit step {dt:.3g} exceeds the stability limit {lim:.3g} of the drift matrix; reduce the step",
                0.9 * lim,
            )
    return None


def solve_evolution(system: EvolutionSystem, grid: TimeGrid | None, noise, workers: int = 1,
                    chunk: int = DEFAULT_CHUNK, check_stiffness: bool = True) -> GalerkinPath:
    ev = _events_for(noise)
    if ev.dW.shape[2] < system.dim_brownian:
        raise ValueError("noise has fewer Brownian components than the system")
    g0 = system.initial()
    if system.is_constant:
        A, B, J = system.matrices()
        if check_stiffness:
            _stiffness_guard(A, float(np.max(ev.dt)) if ev.dt.size else 0.0)
        d = system.dim_brownian

        def job(sub, rows):
            c0 = np.broadcast_to(g0, (sub.n_paths, g0.size))
            return kernels.linear_sde_paths(c0, A, B, J, sub.dt, sub.dW[:, :, :d], sub.marks)
    else:
        def job(sub, rows):
            return _solve_time_dependent(system, sub, g0)

    parts = run_chunks(job, ev, chunk, workers)
    values = np.concatenate([p[0] for p in parts])
    left = np.concatenate([p[1] for p in parts])
    if not np.all(np.isfinite(values)):
        raise StiffnessError("Galerkin coefficients blew up; reduce the time step", None)
    norms = np.einsum("pki,ij,pkj->pk", values, system.gram_H, values)
    return GalerkinPath(ev, values, left, norms)


def _solve_time_dependent(system, ev: EventGrid, g0):
    P, K = ev.n_paths, ev.n_substeps
    c = np.broadcast_to(g0, (P, g0.size)).copy()
    values = np.empty((P, K + 1, g0.size))
    left = np.empty_like(values)
    values[:, 0] = c
    left[:, 0] = c
    for k in range(K):
        for p in range(P):
            A, B, J = system.matrices(float(ev.times[p, k]))
            inc = (A @ c[p]) * ev.dt[p, k]
            for r in range(B.shape[0]):
                inc = inc + (B[r] @ c[p]) * ev.dW[p, k, r]
            c[p] = c[p] + inc
        left[:, k + 1] = c
        for p in np.nonzero(ev.marks[:, k] >= 0)[0]:
            _, _, J = system.matrices(float(ev.times[p, k + 1]))
            c[p] = c[p] + J[ev.marks[p, k]] @ c[p]
        values[:, k + 1] = c
    return values, left


# ---------------------------------------------------------------- energy identity


@dataclass
class EnergyReport:
    max: float
    rms: float
    per_path_max: np.ndarray = field(repr=False, default=None)
    lhs: np.ndarray = field(repr=False, default=None)
    rhs: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {"max": self.max, "rms": self.rms}


def energy_residual(system: EvolutionSystem, path: GalerkinPath, grid: TimeGrid | None = None, noise=None) -> EnergyReport:
    """Both sides of the energy identity at every node, in basis coordinates."""
    ev = path.events
    G = system.gram_H
    Ginv = np.linalg.inv(G)
    rates = system.marks.rates
    P, K = ev.n_paths, ev.n_substeps
    vals, left = path.values, path.left
    lhs = np.einsum("pki,ij,pkj->pk", vals, G, vals)
    rhs = np.empty((P, K + 1))
    rhs[:, 0] = lhs[:, 0]

    def quad(M, c):
        if M.ndim == 3:
            return np.einsum("pi,pij,pj->p", c, M, c)
        return np.einsum("pi,ij,pj->p", c, M, c)

    def forms(t):
        """Operator forms at per-path times t (P,); shared when time-independent."""
        if system.is_constant:
            return (_mat(system.A_form, 0.0), [_mat(b, 0.0) for b in system.B_forms],
                    [_mat(a, 0.0) for a in system.Atil_forms])
        stack = lambda m: np.stack([_mat(m, float(tp)) for tp in t])
        return stack(system.A_form), [stack(b) for b in system.B_forms], [stack(a) for a in system.Atil_forms]

    def sandwich(M):
        return np.swapaxes(M, -1, -2) @ Ginv @ M

    for k in range(K):
        A, Bs, As = forms(ev.times[:, k])
        c = vals[:, k]
        dt = ev.dt[:, k]
        drift = 2.0 * quad(A, c)
        for e, At in enumerate(As):
            aq = quad(sandwich(At), c)
            cross = quad(At, c)
            # v-weighted drift term, the compensator of the N~ integral, and
            # the compensator-quadratic term
            drift = drift + rates[e] * (2.0 * cross) - rates[e] * (aq + 2.0 * cross) + rates[e] * aq
        mart = np.zeros(P)
        for r, Bm in enumerate(Bs):
            drift = drift + quad(sandwich(Bm), c)
            mart = mart + 2.0 * quad(Bm, c) * ev.dW[:, k, r]
        inc = np.where(dt > 0.0, drift * dt + mart, 0.0)
        rhs[:, k + 1] = rhs[:, k] + inc
        mk = ev.marks[:, k]
        for p in np.nonzero(mk >= 0)[0]:
            At = _mat(system.Atil_forms[mk[p]], float(ev.times[p, k + 1]))
            cl = left[p, k + 1]
            rhs[p, k + 1] += cl @ At.T @ Ginv @ At @ cl + 2.0 * cl @ At @ cl
    diff = np.abs(lhs - rhs)
    per_path = diff.max(axis=1)
    return EnergyReport(float(per_path.max()), float(np.sqrt(np.mean(per_path**2))), per_path, lhs, rhs)


def energy_convergence(system: EvolutionSystem, bundles, levels: int = 4) -> tuple:
    dts, errs = [], []
    for i in range(levels):
        coarse = [coarsen_noise(b, 2**i) for b in bundles]
        path = solve_evolution(system, None, coarse)
        rep = energy_residual(system, path)
        dts.append(coarse[0].grid.dt)
        errs.append(rep.rms)
    return fit_order(dts, errs)


# ---------------------------------------------------------------- coercivity


@dataclass
class ProbeReport:
    lam: float
    alpha: float
    min_slack: float
    min_sampled_slack: float
    alpha_max: float
    certified: bool
    minimizer: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "alpha": self.alpha, "min_slack": self.min_slack,
                "min_sampled_slack": self.min_sampled_slack, "alpha_max": self.alpha_max,
                "certified": self.certified}


def _sym_pencil_min(S: np.ndarray, M: np.ndarray) -> tuple:
    """Smallest eigenpair of S v = mu M v for symmetric S and SPD M."""
    L = np.linalg.cholesky(M)
    Linv = np.linalg.inv(L)
    C = Linv @ S @ Linv.T
    C = 0.5 * (C + C.T)
    w, v = np.linalg.eigh(C)
    return float(w[0]), Linv.T @ v[:, 0]


def slack_matrix(system: EvolutionSystem, lam: float, alpha: float, t: float = 0.0) -> np.ndarray:
    G = system.gram_H
    Ginv = np.linalg.inv(G)
    A = _mat(system.A_form, t)
    S = -(A + A.T) + lam * G - alpha * system.gram_V
    for b in system.B_forms:
        Bm = _mat(b, t)
        S = S - Bm.T @ Ginv @ Bm
    for e, a in enumerate(system.Atil_forms):
        Am = _mat(a, t)
        S = S - system.marks.rates[e] * Am.T @ Ginv @ Am
    return 0.5 * (S + S.T)


def coercivity_probe(system: EvolutionSystem, lam: float, alpha: float, n_probe: int = 256, seed: int = 0,
                     t: float = 0.0, tol: float = 1e-10) -> ProbeReport:
    """Slack of the coercivity inequality over H-unit vectors of the basis span."""
    G = system.gram_H
    S = slack_matrix(system, lam, alpha, t)
    mu, vec = _sym_pencil_min(S, G)
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((n_probe, system.size))
    U = U / np.sqrt(np.einsum("pi,ij,pj->p", U, G, U))[:, None]
    sampled = float(np.min(np.einsum("pi,ij,pj->p", U, S, U))) if n_probe > 0 else float("nan")
    S0 = slack_matrix(system, lam, 0.0, t)
    amax, _ = _sym_pencil_min(S0, system.gram_V)
    return ProbeReport(lam, alpha, mu, sampled, amax, bool(mu >= -tol), vec)


# ---------------------------------------------------------------- fixed-point mode


@dataclass
class FixedPointReport:
    path: GalerkinPath
    increments: list
    factors: list


def solve_frozen_jump(system: EvolutionSystem, ev: EventGrid, h_values: np.ndarray, h_left: np.ndarray) -> GalerkinPath:
    """Galerkin system whose N~ integrand uses a frozen input path h instead of u."""
    A, B, J = system.matrices()
    rates = system.marks.rates
    P, K = ev.n_paths, ev.n_substeps
    c = np.broadcast_to(system.initial(), (P, system.size)).copy()
    values = np.empty((P, K + 1, system.size))
    left = np.empty_like(values)
    values[:, 0] = c
    left[:, 0] = c
    # drift of u itself: A + sum v Atil; compensator of the frozen jump term
    Av = A + np.tensordot(rates, J, axes=1)
    Jv = np.tensordot(rates, J, axes=1)
    for k in range(K):
        dt = ev.dt[:, k, None]
        inc = c @ Av.T * dt - h_values[:, k] @ Jv.T * dt
        for r in range(B.shape[0]):
            inc = inc + (c @ B[r].T) * ev.dW[:, k, r, None]
        c = c + np.where(dt > 0.0, inc, 0.0)
        left[:, k + 1] = c
        mk = ev.marks[:, k]
        for p in np.nonzero(mk >= 0)[0]:
            c[p] = c[p] + J[mk[p]] @ h_left[p, k + 1]
        values[:, k + 1] = c
    return GalerkinPath(ev, values, left)


def fixed_point_iteration(system: EvolutionSystem, noise, sweeps: int = 8) -> FixedPointReport:
    """Iterate h -> solution with frozen jump input h, starting from h = 0.

    Reports the sup-distance between successive iterates and its ratio per sweep.
    """
    ev = _events_for(noise)
    P, K, n = ev.n_paths, ev.n_substeps, system.size
    h_vals = np.zeros((P, K + 1, n))
    h_left = np.zeros_like(h_vals)
    incs, factors = [], []
    path = None
    for _ in range(sweeps):
        path = solve_frozen_jump(system, ev, h_vals, h_left)
        inc = float(np.max(np.abs(path.values - h_vals)))
        if incs:
            factors.append(inc / incs[-1] if incs[-1] > 0 else 0.0)
        incs.append(inc)
        h_vals, h_left = path.values, path.left
        if inc == 0.0:
            break
    return FixedPointReport(path, incs, factors)


# ---------------------------------------------------------------- catalog


def _fourier_basis(n_modes: int, include_constant: bool = True):
    """Frequencies of the real orthonormal Fourier basis on the unit torus."""
    freqs, kinds = [], []
    if include_constant:
        freqs.append(0.0)
        kinds.append("const")
    for k in range(1, n_modes + 1):
        w = 2.0 * np.pi * k
        freqs += [w, w]
        kinds += ["cos", "sin"]
    return np.array(freqs), kinds


def _derivative_form(freqs, kinds):
    """Form (d/dx nu_j, nu_i) on the Fourier basis."""
    n = len(freqs)
    D = np.zeros((n, n))
    for j in range(n):
        if kinds[j] == "cos":
            # d/dx cos = -w sin; the sine partner sits at j+1
            D[j + 1, j] = -freqs[j]
        elif kinds[j] == "sin":
            D[j - 1, j] = freqs[j]
    return D


def _shift_form(freqs, kinds, c):
    """Form ((u(. - c) - u), nu_i) on the Fourier basis."""
    n = len(freqs)
    S = np.zeros((n, n))
    for j in range(n):
        th = freqs[j] * c
        if kinds[j] == "const":
            continue
        if kinds[j] == "cos":
            S[j, j] = np.cos(th) - 1.0
            S[j + 1, j] = np.sin(th)
        else:
            S[j, j] = np.cos(th) - 1.0
            S[j - 1, j] = -np.sin(th)
    return S


def _zero_system():
    n = 3
    I = np.eye(n)
    marks = MarkSpace(("e0",), (1.0,))
    Z = np.zeros((n, n))
    return EvolutionSystem("zero", I, I, Z, [Z], [Z], marks, np.array([1.0, 0.5, -0.2]))


def _scalar_jump(a=0.1, beta=0.2, gamma=0.1, rate=2.0, g0=1.0):
    marks = MarkSpace(("e0",), (float(rate),))
    one = np.eye(1)
    # the equation's drift is A + v Atil; the scalar SDE has drift a under N~
    A = np.array([[a - gamma * rate]])
    return EvolutionSystem("scalar-jump", one, one, A, [np.array([[beta]])], [np.array([[gamma]])], marks,
                           np.array([g0]))


def _heat(n_modes=1, diffusivity=1.0, b=0.0, shift=0.0, rate=1.0, name="heat", include_constant=True):
    freqs, kinds = _fourier_basis(n_modes, include_constant)
    n = freqs.size
    GH = np.eye(n)
    GV = np.diag(1.0 + freqs**2)
    A = np.diag(-diffusivity * freqs**2)
    Bs = [b * _derivative_form(freqs, kinds)]
    marks = MarkSpace(("e0",), (float(rate),))
    At = _shift_form(freqs, kinds, shift) if shift else np.zeros((n, n))
    return EvolutionSystem(name, GH, GV, A, Bs, [At], marks, np.ones(n))


def galerkin_system(name: str, **params) -> EvolutionSystem:
    """Named systems: zero, scalar-jump, heat, heat-noise, heat-degenerate."""
    if name == "zero":
        return _zero_system(**params)
    if name == "scalar-jump":
        return _scalar_jump(**params)
    if name == "heat":
        return _heat(**params)
    if name == "heat-noise":
        # 2a - b^2 = 2 delta with a = 0.5, b = 0.6 gives delta = 0.32
        p = dict(n_modes=2, diffusivity=0.5, b=0.6, shift=0.0, rate=1.0)
        p.update(params)
        return _heat(name="heat-noise", **p)
    if name == "heat-degenerate":
        p = dict(n_modes=1, b=0.6)
        p.update(params)
        a = 0.5 * p["b"] ** 2
        return _heat(name="heat-degenerate", diffusivity=a, **p)
    raise KeyError(f"unknown system {name!r}; available: {', '.join(GALERKIN_SYSTEMS)}")


GALERKIN_SYSTEMS = ("zero", "scalar-jump", "heat", "heat-noise", "heat-degenerate")


def heat_delta(system: EvolutionSystem) -> float:
    """delta = a - b^2 / 2 read off the first nonconstant mode of a heat system."""
    G = system.gram_H
    i = 1 if system.gram_V[0, 0] == 1.0 else 0
    w2 = system.gram_V[i, i] - 1.0
    a = -system.A_form[i, i] / w2
    D = system.B_forms[0]
    b = abs(D[i + 1, i]) / np.sqrt(w2) if system.size > i + 1 else 0.0
    return float(a - 0.5 * b * b)
