import numpy as np
import pytest

from bsipde.ito_wentzell import (WENTZELL_SPECS, reconstruction_defect, smoothness_probe, static_identity_spec,
                                 verify_wentzell, wentzell_convergence)
from bsipde.noise import TimeGrid, generate_ensemble


def _noise(spec, steps, paths=8, seed=6):
    return generate_ensemble(TimeGrid(spec.process.horizon, steps), spec.model.marks, seed, paths)


@pytest.mark.parametrize("name", sorted(WENTZELL_SPECS))
def test_specs_reconstruct_exactly(name):
    build, _ = WENTZELL_SPECS[name]
    spec = build()
    assert reconstruction_defect(spec, _noise(spec, 64), np.linspace(0.5, 1.5, 5)) < 1e-10
    assert smoothness_probe(spec) < 1e-3


def test_static_identity_is_exact():
    spec = static_identity_spec()
    rep = verify_wentzell(spec, None, _noise(spec, 64))
    assert rep.max < 1e-12
    assert rep.jump_consistency < 1e-12


def test_brownian_product_converges():
    build, oracle = WENTZELL_SPECS["brownian-product"]
    spec = build()
    fit, reps = wentzell_convergence(spec, _noise(spec, 512, paths=64), levels=3, use_oracle_state=oracle)
    assert fit.exact or fit.slope >= 0.45
    assert reps[0].rms <= reps[-1].rms
