import warnings

import numpy as np
import pytest

from bsipde.bsde import (RegressionConfig, RegressionWarning, apriori_report, batch_rows, compare_to_oracle,
                         homogeneity_drift, nested_mc_oracle, oracle_solution, oracle_triple, solve_bsde,
                         solve_with_errors)
from bsipde.model import catalog_problem
from bsipde.noise import TimeGrid, generate_ensemble
from bsipde.sde_flow import simulate_flow


def _flow(name, steps=16, paths=400, seed=1, mesh=(1.0,)):
    prob = catalog_problem(name)
    g = TimeGrid(prob.horizon, steps)
    return prob, simulate_flow(prob.model, g, generate_ensemble(g, prob.model.marks, seed, paths), list(mesh),
                               record="base")


@pytest.mark.parametrize("kw", [dict(degree=-1), dict(ridge=-1.0), dict(sweeps=1.5), dict(theta=2.0)])
def test_regression_config_validation(kw):
    with pytest.raises(ValueError):
        RegressionConfig(**kw)


def test_terminal_node_is_exact():
    prob, fl = _flow("linear-jump-diffusion")
    sol = solve_bsde(prob.model, fl)
    Y, _, _ = oracle_triple(prob, sol)
    np.testing.assert_allclose(sol.Y[:, -1], np.broadcast_to(Y, sol.Y.shape)[:, -1], atol=1e-14)
    assert sol.is_finite()


def test_linear_driver_is_reproduced():
    prob, fl = _flow("linear-driver", paths=64)
    sol = solve_bsde(prob.model, fl)
    assert np.max(np.abs(sol.Y - oracle_triple(prob, sol)[0])) < 1e-3


def test_martingale_within_standard_errors():
    prob, fl = _flow("linear-jump-diffusion", paths=2000, mesh=(0.8, 1.2))
    sol, se = solve_with_errors(prob.model, fl)
    for c in compare_to_oracle(sol, oracle_triple(prob, sol), se, sigmas=3.0, floor=1e-3):
        assert c.passed, c


def test_oracle_solution_has_zero_error():
    prob, fl = _flow("linear-jump-diffusion", paths=50)
    sol = oracle_solution(prob, fl)
    se = tuple(np.zeros_like(a) for a in (sol.Y, sol.Z, sol.U))
    assert all(c.rms_error == 0.0 for c in compare_to_oracle(sol, oracle_triple(prob, sol), se))


def test_apriori_ratio_and_homogeneity():
    prob, fl = _flow("linear-jump-diffusion", paths=300)
    rep = apriori_report(solve_bsde(prob.model, fl), prob.model)
    # the bound holds up to a constant, so only finiteness of the ratio is checked here
    assert rep.passed and np.isfinite(rep.ratio) and rep.ratio > 0
    assert homogeneity_drift(prob.model, fl, 2.5) < 1e-12
    with pytest.raises(ValueError):
        apriori_report(solve_bsde(prob.model, fl), prob.model, p=1.0)


def test_ill_conditioned_fit_warns():
    prob, fl = _flow("linear-jump-diffusion", paths=40)
    with pytest.warns(RegressionWarning):
        solve_bsde(prob.model, fl, config=RegressionConfig(degree=12, max_condition=1e3))


def test_batch_rows_partition():
    rows = batch_rows(103, 8)
    assert len(rows) == 8
    assert np.array_equal(np.concatenate(rows), np.arange(103))


def test_nested_oracle_limits_and_reproducibility():
    prob = catalog_problem("nonlinear-driver")
    with pytest.raises(ValueError):
        nested_mc_oracle(prob.model, 1.0, TimeGrid(1.0, 16))
    with pytest.raises(ValueError):
        nested_mc_oracle(prob.model, 1.0, TimeGrid(1.0, 2), branching=1)
    a = nested_mc_oracle(prob.model, 1.0, TimeGrid(1.0, 2), branching=4, replicates=4, seed=9)
    b = nested_mc_oracle(prob.model, 1.0, TimeGrid(1.0, 2), branching=4, replicates=4, seed=9)
    np.testing.assert_array_equal(a.mean, b.mean)
    assert np.all(a.se > 0)
