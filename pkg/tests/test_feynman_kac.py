import numpy as np
import pytest

from bsipde.bsde import oracle_solution, solve_bsde
from bsipde.feynman_kac import (bsipde_residual, compose_solution, integrability_proxies, oracle_triple_fields,
                                pide_reference, uniqueness_crosscheck)
from bsipde.inverse_flow import invert_flow_grid
from bsipde.model import catalog_problem
from bsipde.noise import TimeGrid, coarsen_noise, generate_ensemble
from bsipde.sde_flow import simulate_flow

XI = np.linspace(0.25, 3.0, 23)
XQ = np.linspace(0.5, 1.5, 33)


def _oracle_triple(prob, noise):
    fl = simulate_flow(prob.model, None, noise, XI, record="base")
    return compose_solution(oracle_solution(prob, fl), fl, invert_flow_grid(fl, XQ), prob.model), fl


def test_composed_oracle_matches_closed_field():
    prob = catalog_problem("linear-jump-diffusion")
    noise = generate_ensemble(TimeGrid(1.0, 128), prob.model.marks, 3, 16)
    tri, _ = _oracle_triple(prob, noise)
    po, _, _ = oracle_triple_fields(prob, tri)
    v = tri.valid
    assert v.any()
    # p(t, x) = Y(t, u(t, x)) with u from the Euler table; close to the exact field
    assert np.max(np.abs(tri.p - po)[v]) < 5e-2


def test_residual_shrinks_and_detects_perturbation():
    prob = catalog_problem("linear-jump-diffusion")
    fine = generate_ensemble(TimeGrid(1.0, 128), prob.model.marks, 5, 16)
    coarse, _ = _oracle_triple(prob, [coarsen_noise(b, 4) for b in fine])
    tri, _ = _oracle_triple(prob, fine)
    r_coarse = bsipde_residual(coarse, prob.model).rms
    r_fine = bsipde_residual(tri, prob.model).rms
    assert r_fine < r_coarse
    bumped = tri.with_p(tri.p + 0.1 * np.sin(tri.mesh)[None, None, :, None])
    assert bsipde_residual(bumped, prob.model).rms > 10 * r_fine


def test_zero_problem_has_zero_residual():
    prob = catalog_problem("zero")
    tri, _ = _oracle_triple(prob, generate_ensemble(TimeGrid(1.0, 16), prob.model.marks, 0, 4))
    assert bsipde_residual(tri, prob.model).max == 0.0


def test_pide_reference_matches_closed_field():
    prob = catalog_problem("linear-jump-diffusion")
    pf = pide_reference(prob.model, TimeGrid(1.0, 512), np.linspace(0.25, 3.0, 23))
    exact = prob.field(np.zeros(pf.mesh.size), pf.mesh[:, None])
    inner = slice(3, -3)
    assert np.max(np.abs(pf.values[0, inner, 0] - np.reshape(exact, -1)[inner])) < 1e-2


def test_uniqueness_and_integrability_on_regression_triple():
    prob = catalog_problem("linear-jump-diffusion")
    m = prob.model
    g = TimeGrid(1.0, 32)
    fl = simulate_flow(m, g, generate_ensemble(g, m.marks, 7, 200), XI, record="base")
    sol = solve_bsde(m, fl)
    tri = compose_solution(sol, fl, invert_flow_grid(fl, XQ), m)
    rep = uniqueness_crosscheck(tri, fl, sol)
    assert np.isfinite(rep.rms) and rep.rms < 0.1
    proxies = integrability_proxies(tri, m)
    assert all(np.all(np.isfinite(v)) for v in proxies.values())
