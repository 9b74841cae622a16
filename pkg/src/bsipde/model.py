"""Mark spaces, coefficient models, validators and the test-problem catalog.

Conventions used throughout the package:

* points have shape ``(..., n)``; ``t`` broadcasts against ``x.shape[:-1]``
* ``drift(t, x)`` returns ``(..., n)``, ``diffusion(t, x)`` returns ``(..., n, d)``
* ``jump_coeff(t, e, x)`` and ``phi_inverse(t, e, y)`` take an integer mark
  index ``e`` and return ``(..., n)``
* ``driver(t, x, y, z, u)`` takes ``y`` ``(..., l)``, ``z`` ``(..., l, d)``,
  ``u`` ``(..., l, E)`` and returns ``(..., l)``
* ``terminal(x)`` returns ``(..., l)``
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

FD_STEP = 1e-5


class ModelError(ValueError):
    pass


class DegenerateMapError(ModelError):
    """Raised when x + g(t,e,x) = y cannot be solved."""


class UnknownProblemError(KeyError):
    pass


@dataclass(frozen=True)
class MarkSpace:
    marks: tuple
    intensity: tuple

    def __post_init__(self):
        marks = tuple(self.marks)
        rates = tuple(float(v) for v in self.intensity)
        if len(marks) == 0:
            raise ModelError("mark space needs at least one mark")
        if len(marks) != len(rates):
            raise ModelError("one intensity per mark is required")
        if len(set(marks)) != len(marks):
            raise ModelError(f"mark identifiers must be unique, got {marks}")
        for m, v in zip(marks, rates):
            if not (np.isfinite(v) and v > 0.0):
                raise ModelError(f"intensity of mark {m!r} must be positive and finite, got {v}")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "intensity", rates)

    @property
    def size(self) -> int:
        return len(self.marks)

    @property
    def total_intensity(self) -> float:
        return float(sum(self.intensity))

    @property
    def rates(self) -> np.ndarray:
        return np.asarray(self.intensity, dtype=float)

    @property
    def probabilities(self) -> np.ndarray:
        return self.rates / self.total_intensity


def single_mark(rate: float = 1.0) -> MarkSpace:
    return MarkSpace(("e0",), (rate,))


@dataclass(frozen=True)
class CoefficientModel:
    dim_state: int
    dim_brownian: int
    dim_value: int
    marks: MarkSpace
    drift: Callable
    diffusion: Callable
    jump_coeff: Callable
    driver: Callable
    terminal: Callable
    phi_inverse: Callable | None = None
    name: str = "model"
    # optional analytic spatial derivatives
    drift_dx: Callable | None = None  # (..., n, n) with [i, j] = d b_i / d x_j
    diffusion_dx: Callable | None = None  # (..., n, d, n)
    jump_dx: Callable | None = None  # (t, e, x) -> (..., n, n)
    terminal_dx: Callable | None = None  # (..., l, n)
    driver_dx: Callable | None = None  # (..., l, n)
    driver_dy: Callable | None = None  # (..., l, l)
    # declared condition (C6): driver linear in (z, u)
    linear_in_zu: bool = False
    # False means the coefficients carry a random factor; flows and the
    # PDE-side constructions then refuse the model
    deterministic: bool = True

    @property
    def n_marks(self) -> int:
        return self.marks.size

    def with_terminal(self, terminal: Callable, terminal_dx: Callable | None = None) -> "CoefficientModel":
        return dataclasses.replace(self, terminal=terminal, terminal_dx=terminal_dx)

    def with_driver(self, driver: Callable, linear_in_zu: bool = False, **derivs) -> "CoefficientModel":
        return dataclasses.replace(
            self,
            driver=driver,
            linear_in_zu=linear_in_zu,
            driver_dx=derivs.get("driver_dx"),
            driver_dy=derivs.get("driver_dy"),
        )


# ---------------------------------------------------------------- evaluation


def _as_points(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != n:
        x = x[..., None]
    return x


def jacobian_fd(fn: Callable, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``fn(x)`` with respect to the last axis of x.

    Returns an array of shape ``fn(x).shape + (n,)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        cols.append((np.asarray(fn(x + step)) - np.asarray(fn(x - step))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def jump_jacobian(model: CoefficientModel, t, e: int, x) -> np.ndarray:
    if model.jump_dx is not None:
        return np.asarray(model.jump_dx(t, e, x), dtype=float)
    return jacobian_fd(lambda z: model.jump_coeff(t, e, z), x)


def diffusion_jacobian(model: CoefficientModel, t, x) -> np.ndarray:
    if model.diffusion_dx is not None:
        return np.asarray(model.diffusion_dx(t, x), dtype=float)
    return jacobian_fd(lambda z: model.diffusion(t, z), x)


def drift_jacobian(model: CoefficientModel, t, x) -> np.ndarray:
    if model.drift_dx is not None:
        return np.asarray(model.drift_dx(t, x), dtype=float)
    return jacobian_fd(lambda z: model.drift(t, z), x)


def phi(model: CoefficientModel, t, e: int, x) -> np.ndarray:
    """The jump map x -> x + g(t, e, x)."""
    x = np.asarray(x, dtype=float)
    return x + model.jump_coeff(t, e, x)


def eval_phi_inverse(model: CoefficientModel, t, e: int, y, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Solve x + g(t,e,x) = y for x.

    Uses the analytic inverse when the model carries one, otherwise a damped
    Newton iteration started at y.
    """
    y = _as_points(y, model.dim_state)
    if model.phi_inverse is not None:
        return np.asarray(model.phi_inverse(t, e, y), dtype=float)
    n = model.dim_state
    x = y.copy()
    eye = np.eye(n)
    scale = 1.0 + np.max(np.abs(y)) if y.size else 1.0
    for _ in range(max_iter):
        res = x + model.jump_coeff(t, e, x) - y
        err = np.max(np.abs(res)) if res.size else 0.0
        if err <= tol * scale:
            return x
        jac = eye + jump_jacobian(model, t, e, x)
        try:
            step = np.linalg.solve(jac, res[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise DegenerateMapError(f"singular Jacobian I + dg for mark {e}; the jump map is not invertible") from None
        # halve the step while the residual grows
        lam = 1.0
        base = np.linalg.norm(res, axis=-1)
        for _ in range(30):
            trial = x - lam * step
            new = np.linalg.norm(trial + model.jump_coeff(t, e, trial) - y, axis=-1)
            if np.all(new <= base) or lam < 1e-6:
                break
            lam *= 0.5
        x = trial
    res = x + model.jump_coeff(t, e, x) - y
    err = np.max(np.abs(res))
    if err <= tol * scale:
        return x
    worst = np.unravel_index(np.argmax(np.abs(res)), res.shape)
    raise DegenerateMapError(
        f"Newton solve of x + g(t,e,x) = y did not converge in {max_iter} iterations "
        f"(mark {e}, residual {err:.3e} at index {worst})"
    )


# ---------------------------------------------------------------- validation


@dataclass
class ConditionResult:
    name: str
    statistic: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    conditions: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.errors and all(c.passed for c in self.conditions.values())

    def __getitem__(self, key):
        return self.conditions[key]

    def summary(self) -> str:
        lines = []
        for c in self.conditions.values():
            flag = "pass" if c.passed else "FAIL"
            lines.append(f"{c.name}: {flag} statistic={c.statistic:.6g} threshold={c.threshold:.6g} {c.detail}")
        lines.extend(f"error: {e}" for e in self.errors)
        return "\n".join(lines)


@dataclass
class ValidationThresholds:
    growth: float = 1e3
    lipschitz: float = 1e3
    inverse_error: float = 1e-10
    min_det: float = 1e-8


def validate_model(
    model: CoefficientModel,
    sample_box,
    n_samples: int = 256,
    horizon: float = 1.0,
    seed: int = 0,
    thresholds: ValidationThresholds | None = None,
) -> ValidationReport:
    """Sampled checks of growth, smoothness, invertibility and Jacobian of the jump map.

    ``sample_box`` is ``(low, high)`` with scalars or length-n sequences.
    """
    if n_samples < 1:
        raise ModelError("n_samples must be at least 1")
    th = thresholds or ValidationThresholds()
    n = model.dim_state
    lo = np.broadcast_to(np.asarray(sample_box[0], dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(sample_box[1], dtype=float), (n,))
    rng = np.random.default_rng(seed)
    xs = lo + (hi - lo) * rng.random((n_samples, n))
    ts = horizon * rng.random(n_samples)
    report = ValidationReport()

    def check_finite(label, arr, e=None):
        arr = np.asarray(arr)
        bad = ~np.isfinite(arr.reshape(n_samples, -1)).all(axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            where = f"t={ts[i]:.6g}, x={xs[i].tolist()}" + ("" if e is None else f", mark={e}")
            report.errors.append(f"{label} is not finite at {where}")
            return False
        return True

    b = model.drift(ts, xs)
    sig = model.diffusion(ts, xs)
    ok = check_finite("drift", b) and check_finite("diffusion", sig)
    gs = []
    for e in range(model.n_marks):
        g = model.jump_coeff(ts, e, xs)
        ok = check_finite("jump_coeff", g, e) and ok
        gs.append(g)
    if not ok:
        return report

    # (C1): |b| + |sigma| + K <= C (1 + |x|); report the sampled ratio
    norm1 = 1.0 + np.linalg.norm(xs, axis=-1)
    growth = np.linalg.norm(b, axis=-1) + np.linalg.norm(sig.reshape(n_samples, -1), axis=-1)
    for g in gs:
        growth = growth + np.linalg.norm(g, axis=-1)
    stat = float(np.max(growth / norm1))
    report.conditions["C1"] = ConditionResult("C1", stat, th.growth, stat <= th.growth, "sup (|b|+|sigma|+sum|g|)/(1+|x|)")

    # (C2): first-derivative bounds by central differences
    db = drift_jacobian(model, ts, xs)
    dsig = diffusion_jacobian(model, ts, xs)
    lip = max(float(np.max(np.abs(db))), float(np.max(np.abs(dsig))))
    for e in range(model.n_marks):
        lip = max(lip, float(np.max(np.abs(jump_jacobian(model, ts, e, xs)))))
    report.conditions["C2"] = ConditionResult("C2", lip, th.lipschitz, lip <= th.lipschitz, "max |derivative| of b, sigma, g")

    # (C3): phi_inverse composed with phi is the identity
    inv_err = 0.0
    try:
        for e in range(model.n_marks):
            back = eval_phi_inverse(model, ts, e, phi(model, ts, e, xs))
            inv_err = max(inv_err, float(np.max(np.abs(back - xs))))
    except DegenerateMapError as exc:
        inv_err = float("inf")
        report.errors.append(str(exc))
    report.conditions["C3"] = ConditionResult(
        "C3", inv_err, th.inverse_error, inv_err <= th.inverse_error, "max |phi^-1(phi(x)) - x|"
    )

    # (C4): the Jacobian of the jump map stays away from singular
    min_det = np.inf
    eye = np.eye(n)
    for e in range(model.n_marks):
        det = np.abs(np.linalg.det(eye + jump_jacobian(model, ts, e, xs)))
        min_det = min(min_det, float(np.min(det)))
    report.conditions["C4"] = ConditionResult("C4", min_det, th.min_det, min_det > th.min_det, "min |det(I + dg)|")
    return report


def check_driver_linearity(model: CoefficientModel, n_samples: int = 64, seed: int = 0, box=(-2.0, 2.0)) -> float:
    """Superposition defect of z,u -> f(t,x,y,z,u) - f(t,x,y,0,0).

    Returns the max over samples of |D(z1+a z2, u1+a u2) - D(z1,u1) - a D(z2,u2)|.
    """
    n, d, l, E = model.dim_state, model.dim_brownian, model.dim_value, model.n_marks
    rng = np.random.default_rng(seed)
    lo, hi = box
    t = rng.random(n_samples)
    x = lo + (hi - lo) * rng.random((n_samples, n))
    y = lo + (hi - lo) * rng.random((n_samples, l))
    z1, z2 = (rng.standard_normal((n_samples, l, d)) for _ in range(2))
    u1, u2 = (rng.standard_normal((n_samples, l, E)) for _ in range(2))
    a = rng.standard_normal((n_samples, 1))
    z0 = np.zeros((n_samples, l, d))
    u0 = np.zeros((n_samples, l, E))
    base = model.driver(t, x, y, z0, u0)

    def part(z, u):
        return model.driver(t, x, y, z, u) - base

    lhs = part(z1 + a[..., None] * z2, u1 + a[..., None] * u2)
    rhs = part(z1, u1) + a * part(z2, u2)
    return float(np.max(np.abs(lhs - rhs)))


# ---------------------------------------------------------------- catalog


@dataclass
class TestProblem:
    """A model with optional closed-form oracles.

    ``flow(t, x, w, counts)`` gives X_t(x) from the Brownian value W_t (d,)
    and the per-mark jump counts N_t (E,); ``inverse_flow`` is its inverse in
    x. ``bsde(t, x_t, x_left)`` returns (Y, Z, U) along a path with current
    state x_t and left limit x_left. ``field(t, x)`` is the deterministic
    solution p of the backward equation when one exists.
    """

    __test__ = False  # not a pytest class

    name: str
    model: CoefficientModel
    horizon: float = 1.0
    params: Mapping = field(default_factory=dict)
    flow: Callable | None = None
    inverse_flow: Callable | None = None
    bsde: Callable | None = None
    field: Callable | None = None
    flow_dx: Callable | None = None

    def oracle_relations(self, n_samples: int = 200, seed: int = 0) -> dict:
        """Max defects of the defining relations of the attached oracles."""
        rng = np.random.default_rng(seed)
        m = self.model
        out = {}
        t = self.horizon * rng.random(n_samples)
        x = rng.uniform(0.5, 1.5, (n_samples, m.dim_state))
        w = rng.standard_normal((n_samples, m.dim_brownian)) * np.sqrt(t)[:, None]
        counts = rng.poisson(1.0, (n_samples, m.n_marks))
        if self.flow is not None and self.inverse_flow is not None:
            back = self.inverse_flow(t, self.flow(t, x, w, counts), w, counts)
            out["inverse_after_flow"] = float(np.max(np.abs(back - x)))
        if self.field is not None and self.flow is not None and self.bsde is not None:
            xt = self.flow(t, x, w, counts)
            y, _, _ = self.bsde(t, xt, xt)
            out["field_vs_bsde"] = float(np.max(np.abs(self.field(t, xt) - y)))
        for e in range(m.n_marks):
            y = x + 0.1 * rng.standard_normal(x.shape)
            back = phi(m, t, e, eval_phi_inverse(m, t, e, y))
            out[f"phi_inverse_mark{e}"] = float(np.max(np.abs(back - y)))
        return out


def _zeros_like_points(x, n):
    return np.zeros(np.shape(x)[:-1] + (n,))


def _zero_driver(t, x, y, z, u):
    return np.zeros(np.shape(y))


def _identity_terminal(x):
    return np.asarray(x, dtype=float)[..., :1]


def _identity_terminal_dx(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (1, x.shape[-1]))
    out[..., 0, 0] = 1.0
    return out


def _mark_space(rates) -> MarkSpace:
    rates = tuple(float(r) for r in np.atleast_1d(rates))
    return MarkSpace(tuple(f"e{i}" for i in range(len(rates))), rates)


def _per_mark(value, E: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.full(E, float(arr[0]))
    if arr.size != E:
        raise ModelError(f"expected one value per mark ({E}), got {arr.size}")
    return arr


def _zero_problem(T=1.0, rates=(1.0,)):
    marks = _mark_space(rates)
    model = CoefficientModel(
        dim_state=1,
        dim_brownian=1,
        dim_value=1,
        marks=marks,
        drift=lambda t, x: _zeros_like_points(x, 1),
        diffusion=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        jump_coeff=lambda t, e, x: _zeros_like_points(x, 1),
        phi_inverse=lambda t, e, y: np.array(y, dtype=float),
        driver=_zero_driver,
        terminal=_identity_terminal,
        terminal_dx=_identity_terminal_dx,
        drift_dx=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        diffusion_dx=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1, 1)),
        jump_dx=lambda t, e, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        linear_in_zu=True,
        name="zero",
    )

    def flow(t, x, w, counts):
        return np.array(x, dtype=float)

    def bsde(t, xt, xl):
        xt = np.asarray(xt, dtype=float)
        return xt[..., :1], np.zeros(xt.shape[:-1] + (1, 1)), np.zeros(xt.shape[:-1] + (1, marks.size))

    return TestProblem(
        "zero", model, T, {"T": T}, flow=flow, inverse_flow=flow, bsde=bsde,
        field=lambda t, x: np.asarray(x, dtype=float)[..., :1],
        flow_dx=lambda t, x, w, counts: np.ones(np.shape(x)[:-1] + (1, 1)),
    )


def _additive_problem(s=0.15, T=1.0, rates=(1.0,)):
    marks = _mark_space(rates)
    s = float(s)
    model = CoefficientModel(
        dim_state=1,
        dim_brownian=1,
        dim_value=1,
        marks=marks,
        drift=lambda t, x: _zeros_like_points(x, 1),
        diffusion=lambda t, x: np.full(np.shape(x)[:-1] + (1, 1), s),
        jump_coeff=lambda t, e, x: _zeros_like_points(x, 1),
        phi_inverse=lambda t, e, y: np.array(y, dtype=float),
        driver=_zero_driver,
        terminal=_identity_terminal,
        terminal_dx=_identity_terminal_dx,
        drift_dx=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        diffusion_dx=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1, 1)),
        jump_dx=lambda t, e, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        linear_in_zu=True,
        name="additive-brownian",
    )

    def flow(t, x, w, counts):
        return np.asarray(x, dtype=float) + s * np.asarray(w, dtype=float)[..., :1]

    def inverse(t, y, w, counts):
        return np.asarray(y, dtype=float) - s * np.asarray(w, dtype=float)[..., :1]

    def bsde(t, xt, xl):
        xt = np.asarray(xt, dtype=float)
        return xt[..., :1], np.full(xt.shape[:-1] + (1, 1), s), np.zeros(xt.shape[:-1] + (1, marks.size))

    return TestProblem(
        "additive-brownian", model, T, {"s": s, "T": T}, flow=flow, inverse_flow=inverse, bsde=bsde,
        field=lambda t, x: np.asarray(x, dtype=float)[..., :1],
        flow_dx=lambda t, x, w, counts: np.ones(np.shape(x)[:-1] + (1, 1)),
    )


def _shift_problem(c=0.25, rate=2.0, T=1.0):
    marks = _mark_space(rate)
    E = marks.size
    cs = _per_mark(c, E)
    vs = marks.rates
    comp = float(np.dot(cs, vs))
    model = CoefficientModel(
        dim_state=1,
        dim_brownian=1,
        dim_value=1,
        marks=marks,
        drift=lambda t, x: _zeros_like_points(x, 1),
        diffusion=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        jump_coeff=lambda t, e, x: np.full(np.shape(x)[:-1] + (1,), cs[e]),
        phi_inverse=lambda t, e, y: np.asarray(y, dtype=float) - cs[e],
        driver=_zero_driver,
        terminal=_identity_terminal,
        terminal_dx=_identity_terminal_dx,
        drift_dx=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        diffusion_dx=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1, 1)),
        jump_dx=lambda t, e, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        linear_in_zu=True,
        name="pure-jump-shift",
    )

    def shift(t, counts):
        counts = np.asarray(counts, dtype=float)
        return (counts @ cs - comp * np.asarray(t, dtype=float))[..., None]

    def flow(t, x, w, counts):
        return np.asarray(x, dtype=float) + shift(t, counts)

    def inverse(t, y, w, counts):
        return np.asarray(y, dtype=float) - shift(t, counts)

    def bsde(t, xt, xl):
        xt = np.asarray(xt, dtype=float)
        u = np.broadcast_to(cs, xt.shape[:-1] + (1, E)).copy()
        return xt[..., :1], np.zeros(xt.shape[:-1] + (1, 1)), u

    return TestProblem(
        "pure-jump-shift", model, T, {"c": cs.tolist(), "rates": vs.tolist(), "T": T},
        flow=flow, inverse_flow=inverse, bsde=bsde,
        field=lambda t, x: np.asarray(x, dtype=float)[..., :1],
        flow_dx=lambda t, x, w, counts: np.ones(np.shape(x)[:-1] + (1, 1)),
    )


def _linear_forward(a, s, cs, marks):
    """Coefficients b = a x, sigma = s x, g = c_e x in one dimension."""
    a, s = float(a), float(s)

    def drift(t, x):
        return a * np.asarray(x, dtype=float)

    def diffusion(t, x):
        return s * np.asarray(x, dtype=float)[..., None]

    def jump(t, e, x):
        return cs[e] * np.asarray(x, dtype=float)

    def phi_inv(t, e, y):
        return np.asarray(y, dtype=float) / (1.0 + cs[e])

    def drift_dx(t, x):
        return np.full(np.shape(x)[:-1] + (1, 1), a)

    def diffusion_dx(t, x):
        return np.full(np.shape(x)[:-1] + (1, 1, 1), s)

    def jump_dx(t, e, x):
        return np.full(np.shape(x)[:-1] + (1, 1), cs[e])

    return dict(
        drift=drift, diffusion=diffusion, jump_coeff=jump, phi_inverse=phi_inv,
        drift_dx=drift_dx, diffusion_dx=diffusion_dx, jump_dx=jump_dx,
    )


def _linear_flow_oracles(a, s, cs, marks):
    vs = marks.rates
    rate = a - 0.5 * s * s - float(np.dot(cs, vs))
    logs = np.log1p(cs)

    def growth(t, w, counts):
        t = np.asarray(t, dtype=float)
        w = np.asarray(w, dtype=float)[..., 0]
        counts = np.asarray(counts, dtype=float)
        return np.exp(rate * t + s * w + counts @ logs)[..., None]

    def flow(t, x, w, counts):
        return np.asarray(x, dtype=float) * growth(t, w, counts)

    def inverse(t, y, w, counts):
        return np.asarray(y, dtype=float) / growth(t, w, counts)

    def flow_dx(t, x, w, counts):
        return growth(t, w, counts)[..., None]

    return flow, inverse, flow_dx


def _linear_jump_diffusion(a=0.1, s=0.2, c=0.1, rates=(1.0, 1.0), T=1.0):
    marks = _mark_space(rates)
    E = marks.size
    cs = _per_mark(c, E)
    if np.any(cs <= -1.0):
        raise ModelError("jump sizes c must exceed -1 so that the jump map is invertible")
    coeffs = _linear_forward(a, s, cs, marks)
    model = CoefficientModel(
        dim_state=1,
        dim_brownian=1,
        dim_value=1,
        marks=marks,
        driver=_zero_driver,
        terminal=_identity_terminal,
        terminal_dx=_identity_terminal_dx,
        linear_in_zu=True,
        name="linear-jump-diffusion",
        **coeffs,
    )
    flow, inverse, flow_dx = _linear_flow_oracles(a, s, cs, marks)
    a, s, T = float(a), float(s), float(T)

    def bsde(t, xt, xl):
        # E[X_T | F_t] = X_t e^{a(T-t)} has the martingale representation below
        disc = np.exp(a * (T - np.asarray(t, dtype=float)))[..., None]
        xt = np.asarray(xt, dtype=float)
        xl = np.asarray(xl, dtype=float)
        y = xt * disc
        z = (s * xt * disc)[..., None]
        u = (xl * disc)[..., None] * cs
        return y, z, u

    def field_(t, x):
        return np.asarray(x, dtype=float) * np.exp(a * (T - np.asarray(t, dtype=float)))[..., None]

    return TestProblem(
        "linear-jump-diffusion", model, T,
        {"a": a, "s": s, "c": cs.tolist(), "rates": marks.rates.tolist(), "T": T},
        flow=flow, inverse_flow=inverse, bsde=bsde, field=field_, flow_dx=flow_dx,
    )


def _linear_driver(r0=0.5, terminal="one", a=0.0, s=0.0, c=0.0, rates=(1.0,), T=1.0):
    """Driver f = -r0 y, declared linear in (z, u).

    With terminal "one" the solution is Y_t = exp(-r0 (T - t)) for any forward
    dynamics. With terminal "identity" and linear forward coefficients it is
    Y_t = X_t exp((a - r0)(T - t)).
    """
    marks = _mark_space(rates)
    E = marks.size
    cs = _per_mark(c, E)
    coeffs = _linear_forward(a, s, cs, marks)
    r0, a, s, T = float(r0), float(a), float(s), float(T)

    def driver(t, x, y, z, u):
        return -r0 * np.asarray(y, dtype=float)

    def driver_dx(t, x, y, z, u):
        return np.zeros(np.shape(y) + (np.shape(x)[-1],))

    def driver_dy(t, x, y, z, u):
        return np.broadcast_to(-r0 * np.eye(1), np.shape(y)[:-1] + (1, 1)).copy()

    if terminal == "one":
        term = lambda x: np.ones(np.shape(x)[:-1] + (1,))
        term_dx = lambda x: np.zeros(np.shape(x)[:-1] + (1, 1))
        rate = -r0
        scale_x = False
    elif terminal == "identity":
        term, term_dx = _identity_terminal, _identity_terminal_dx
        rate = a - r0
        scale_x = True
    else:
        raise ModelError(f"unknown terminal {terminal!r}; use 'one' or 'identity'")

    model = CoefficientModel(
        dim_state=1,
        dim_brownian=1,
        dim_value=1,
        marks=marks,
        driver=driver,
        terminal=term,
        terminal_dx=term_dx,
        driver_dx=driver_dx,
        driver_dy=driver_dy,
        linear_in_zu=True,
        name="linear-driver",
        **coeffs,
    )
    flow, inverse, flow_dx = _linear_flow_oracles(a, s, cs, marks)

    def bsde(t, xt, xl):
        disc = np.exp(rate * (T - np.asarray(t, dtype=float)))[..., None]
        xt = np.asarray(xt, dtype=float)
        xl = np.asarray(xl, dtype=float)
        if scale_x:
            return xt * disc, (s * xt * disc)[..., None], (xl * disc)[..., None] * cs
        shape = xt.shape[:-1]
        return np.broadcast_to(disc, shape + (1,)).copy(), np.zeros(shape + (1, 1)), np.zeros(shape + (1, E))

    def field_(t, x):
        disc = np.exp(rate * (T - np.asarray(t, dtype=float)))[..., None]
        x = np.asarray(x, dtype=float)
        return x * disc if scale_x else np.broadcast_to(disc, x.shape[:-1] + (1,)).copy()

    return TestProblem(
        "linear-driver", model, T,
        {"r0": r0, "terminal": terminal, "a": a, "s": s, "c": cs.tolist(), "rates": marks.rates.tolist(), "T": T},
        flow=flow, inverse_flow=inverse, bsde=bsde, field=field_, flow_dx=flow_dx,
    )


def _nonlinear_driver(a=0.1, s=0.2, c=0.1, rates=(1.0, 1.0), r0=0.5, kappa=0.1, theta=0.2, eta=0.1, T=1.0):
    """Linear forward dynamics with driver -r0 y + kappa cos(y) + theta z + eta sum_e v_e u_e.

    No closed form; used against the nested Monte Carlo oracle.
    """
    marks = _mark_space(rates)
    E = marks.size
    cs = _per_mark(c, E)
    vs = marks.rates
    coeffs = _linear_forward(a, s, cs, marks)
    r0, kappa, theta, eta = float(r0), float(kappa), float(theta), float(eta)

    def driver(t, x, y, z, u):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        return -r0 * y + kappa * np.cos(y) + theta * z[..., 0] + eta * np.sum(u * vs, axis=-1)

    def driver_dy(t, x, y, z, u):
        y = np.asarray(y, dtype=float)
        return (-r0 - kappa * np.sin(y))[..., None]

    def driver_dx(t, x, y, z, u):
        return np.zeros(np.shape(y) + (np.shape(x)[-1],))

    model = CoefficientModel(
        dim_state=1,
        dim_brownian=1,
        dim_value=1,
        marks=marks,
        driver=driver,
        terminal=_identity_terminal,
        terminal_dx=_identity_terminal_dx,
        driver_dx=driver_dx,
        driver_dy=driver_dy,
        linear_in_zu=True,
        name="nonlinear-driver",
        **coeffs,
    )
    flow, inverse, flow_dx = _linear_flow_oracles(a, s, cs, marks)
    return TestProblem(
        "nonlinear-driver", model, T,
        {"a": a, "s": s, "c": cs.tolist(), "rates": vs.tolist(), "r0": r0, "kappa": kappa,
         "theta": theta, "eta": eta, "T": T},
        flow=flow, inverse_flow=inverse, flow_dx=flow_dx,
    )


_CATALOG = {
    "zero": _zero_problem,
    "additive-brownian": _additive_problem,
    "pure-jump-shift": _shift_problem,
    "linear-jump-diffusion": _linear_jump_diffusion,
    "linear-driver": _linear_driver,
    "nonlinear-driver": _nonlinear_driver,
}


def available_problems() -> list:
    return sorted(_CATALOG)


def catalog_problem(name: str, **params) -> TestProblem:
    """Build a catalog problem; keyword arguments override its default parameters."""
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise UnknownProblemError(
            f"unknown problem {name!r}; available: {', '.join(available_problems())}"
        ) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ModelError(f"bad parameters for {name!r}: {exc}") from None


def custom_jump_model(jump: Callable, rates: Sequence[float] = (1.0,), jump_dx: Callable | None = None,
                      name: str = "custom") -> CoefficientModel:
    """One-dimensional model with zero drift and diffusion and the given jump coefficient."""
    return CoefficientModel(
        dim_state=1,
        dim_brownian=1,
        dim_value=1,
        marks=_mark_space(rates),
        drift=lambda t, x: _zeros_like_points(x, 1),
        diffusion=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        jump_coeff=jump,
        jump_dx=jump_dx,
        driver=_zero_driver,
        terminal=_identity_terminal,
        name=name,
    )
