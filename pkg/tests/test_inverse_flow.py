import numpy as np
import pytest

from bsipde.inverse_flow import (NonInvertibleSampleError, UnsupportedDimensionError, integrate_inverse_sipde,
                                 inverse_identity, invert_flow_grid)
from bsipde.model import catalog_problem
from bsipde.noise import TimeGrid, generate_ensemble
from bsipde.sde_flow import FlowField, simulate_flow


def _noise(prob, steps=128, paths=8, seed=4):
    return generate_ensemble(TimeGrid(prob.horizon, steps), prob.model.marks, seed, paths)


@pytest.mark.parametrize("method", ["grid", "sipde", "backward"])
def test_identity_is_exact_for_additive_noise(method):
    prob = catalog_problem("additive-brownian")
    rep = inverse_identity(prob.model, _noise(prob), np.linspace(-1, 1, 33), method,
                           sipde_mesh=np.linspace(-2.5, 2.5, 161), band=2, n_check=8)
    assert rep.count > 0
    assert rep.max < 1e-3


def test_grid_inverse_of_closed_form_flow():
    prob = catalog_problem("linear-jump-diffusion")
    mesh = np.linspace(0.25, 3.0, 200)
    fl = simulate_flow(prob.model, None, _noise(prob), mesh, record="base")
    q = np.linspace(0.8, 1.2, 5)
    inv = invert_flow_grid(fl, q)
    t = fl.events.grid.nodes
    ev = fl.events
    w = ev.W[:, ev.base_nodes][:, :, None, :]
    c = ev.counts(ev.base_nodes)[:, :, None, :]
    exact = prob.inverse_flow(t[None, :, None], q[:, None], w, c)[..., 0]
    ok = ~inv.extrapolated
    # the table carries the Euler error of the forward flow, about 4e-3 here
    assert np.max(np.abs(inv.values - exact)[ok]) < 2e-2


def test_grid_inverse_recovers_table_points():
    prob = catalog_problem("linear-jump-diffusion")
    mesh = np.linspace(0.5, 1.5, 11)
    fl = simulate_flow(prob.model, None, _noise(prob, paths=1), mesh, record="base")
    k = 40
    inv = invert_flow_grid(fl, fl.values[0, k, 3:8, 0])
    np.testing.assert_allclose(inv.values[0, k], mesh[3:8], atol=1e-12)


def test_nonmonotone_table_raises():
    prob = catalog_problem("linear-jump-diffusion")
    fl = simulate_flow(prob.model, None, _noise(prob, paths=2), np.linspace(0.5, 1.5, 5), record="base")
    vals = fl.values.copy()
    vals[1, 3, 2, 0] = vals[1, 3, 1, 0]
    with pytest.raises(NonInvertibleSampleError, match="path"):
        invert_flow_grid(FlowField(fl.mesh, fl.events, vals, vals, "base"), [1.0])


def test_two_dimensional_state_rejected():
    prob = catalog_problem("linear-jump-diffusion")
    fl = simulate_flow(prob.model, None, _noise(prob, paths=1), np.linspace(0.5, 1.5, 4), record="base")
    wide = np.concatenate([fl.values, fl.values], axis=-1)
    with pytest.raises(UnsupportedDimensionError):
        invert_flow_grid(FlowField(np.c_[fl.mesh, fl.mesh], fl.events, wide, wide, "base"), [1.0])


def test_sipde_band_and_extrapolation_flags():
    prob = catalog_problem("pure-jump-shift")
    mesh = np.linspace(-1.0, 1.0, 41)
    inv = integrate_inverse_sipde(prob.model, None, _noise(prob), mesh, record="base", band=2)
    assert inv.band[:2].all() and inv.band[-2:].all() and not inv.band[2:-2].any()
    interior = inv.interior()
    assert not interior[..., :2].any()
    assert interior.any()
