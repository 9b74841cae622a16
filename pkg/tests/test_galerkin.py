import numpy as np
import pytest

from bsipde.galerkin import (EvolutionSystem, GramError, StiffnessError, coercivity_probe, energy_residual,
                             fixed_point_iteration, galerkin_system, heat_delta, solve_evolution)
from bsipde.model import MarkSpace
from bsipde.noise import TimeGrid, generate_ensemble


def _noise(system, steps=256, paths=8, seed=1, horizon=1.0):
    return generate_ensemble(TimeGrid(horizon, steps), system.marks, seed, paths)


def test_zero_system_keeps_initial_value():
    s = galerkin_system("zero")
    path = solve_evolution(s, None, _noise(s))
    np.testing.assert_array_equal(path.values, np.broadcast_to(s.initial(), path.values.shape))
    assert energy_residual(s, path).max < 1e-12


def test_scalar_jump_energy_shrinks_with_step():
    s = galerkin_system("scalar-jump")
    noise = _noise(s, steps=1024, paths=64)
    from bsipde.noise import coarsen_noise
    fine = energy_residual(s, solve_evolution(s, None, noise)).rms
    coarse = energy_residual(s, solve_evolution(s, None, [coarsen_noise(b, 8) for b in noise])).rms
    assert fine < coarse


def test_gram_validation():
    marks = MarkSpace(("e0",), (1.0,))
    Z = np.zeros((2, 2))
    with pytest.raises(GramError, match="symmetric"):
        EvolutionSystem("bad", np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2), Z, [Z], [Z], marks, np.ones(2))
    with pytest.raises(GramError, match="positive definite"):
        EvolutionSystem("bad", np.diag([1.0, -1.0]), np.eye(2), Z, [Z], [Z], marks, np.ones(2))
    with pytest.raises(ValueError, match="Atil"):
        EvolutionSystem("bad", np.eye(2), np.eye(2), Z, [Z], [], marks, np.ones(2))


def test_stiff_step_is_refused_with_suggestion():
    s = galerkin_system("heat", n_modes=4)
    with pytest.raises(StiffnessError) as err:
        solve_evolution(s, None, _noise(s, steps=16, paths=1))
    assert 0 < err.value.suggested_dt < 1.0 / 16


def test_coercivity_at_delta():
    s = galerkin_system("heat-noise")
    d = heat_delta(s)
    assert d == pytest.approx(0.32)
    rep = coercivity_probe(s, lam=max(d, 1.0), alpha=d)
    assert rep.certified and rep.min_sampled_slack >= -1e-10
    assert rep.alpha_max >= d - 1e-12
    assert not coercivity_probe(s, lam=1.0, alpha=rep.alpha_max + 0.05).certified


def test_fixed_point_contracts_to_direct_solution():
    s = galerkin_system("scalar-jump")
    noise = _noise(s, steps=128, paths=4)
    fp = fixed_point_iteration(s, noise, sweeps=12)
    direct = solve_evolution(s, None, noise)
    assert fp.increments[-1] < fp.increments[0]
    np.testing.assert_allclose(fp.path.values, direct.values, atol=1e-6)


def test_unknown_system():
    with pytest.raises(KeyError, match="available"):
        galerkin_system("nope")
