import numpy as np
import pytest

from bsipde.model import catalog_problem
from bsipde.noise import TimeGrid, generate_ensemble
from bsipde.sde_flow import check_flow_properties, oracle_on_events, simulate_flow

MESH = np.linspace(0.5, 1.5, 9)


def _noise(problem, steps=64, paths=6, seed=2):
    return generate_ensemble(TimeGrid(problem.horizon, steps), problem.model.marks, seed, paths)


@pytest.mark.parametrize("name", ["additive-brownian", "pure-jump-shift"])
def test_exact_schemes_match_closed_form(name):
    prob = catalog_problem(name)
    fl = simulate_flow(prob.model, None, _noise(prob), MESH)
    vals, left = oracle_on_events(prob, fl.events, MESH)
    np.testing.assert_allclose(fl.values, vals, atol=1e-12)
    np.testing.assert_allclose(fl.left, left, atol=1e-12)


def test_flow_properties_on_linear_model():
    prob = catalog_problem("linear-jump-diffusion")
    rep = check_flow_properties(prob.model, None, _noise(prob), MESH, restart_time=0.5)
    assert rep.semigroup_error < 1e-10
    assert rep.jump_relation_error < 1e-10
    assert rep.monotonicity_violations == 0
    assert rep.n_jumps > 0


def test_base_recording_matches_all():
    prob = catalog_problem("linear-jump-diffusion")
    noise = _noise(prob)
    a = simulate_flow(prob.model, None, noise, MESH)
    b = simulate_flow(prob.model, None, noise, MESH, record="base")
    np.testing.assert_array_equal(a.at_base()[0], b.values)


def test_workers_do_not_change_results():
    prob = catalog_problem("linear-jump-diffusion")
    noise = _noise(prob, paths=40)
    a = simulate_flow(prob.model, None, noise, MESH, chunk=8, workers=1)
    b = simulate_flow(prob.model, None, noise, MESH, chunk=8, workers=4)
    np.testing.assert_array_equal(a.values, b.values)


def test_restart_time_must_be_a_node():
    prob = catalog_problem("linear-jump-diffusion")
    with pytest.raises(ValueError, match="not a grid node"):
        check_flow_properties(prob.model, None, _noise(prob), MESH, restart_time=0.501)


def test_grid_mismatch_rejected():
    prob = catalog_problem("linear-jump-diffusion")
    with pytest.raises(ValueError):
        simulate_flow(prob.model, TimeGrid(1.0, 32), _noise(prob), MESH)


def test_path_view_strips_padding():
    prob = catalog_problem("pure-jump-shift")
    fl = simulate_flow(prob.model, None, _noise(prob), MESH)
    for p in range(fl.events.n_paths):
        t, v, _ = fl.path_view(p)
        assert np.all(np.diff(t) > 0)
        assert v.shape[0] == t.size
