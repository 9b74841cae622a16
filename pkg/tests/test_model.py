import dataclasses

import numpy as np
import pytest

from bsipde.model import (MarkSpace, ModelError, UnknownProblemError, available_problems, catalog_problem,
                          check_driver_linearity, custom_jump_model, eval_phi_inverse, phi, validate_model)


def test_catalog_lists_all_problems():
    assert set(available_problems()) == {"zero", "additive-brownian", "pure-jump-shift", "linear-jump-diffusion",
                                         "linear-driver", "nonlinear-driver"}


def test_unknown_problem_names_the_choices():
    with pytest.raises(UnknownProblemError, match="available"):
        catalog_problem("nope")


def test_bad_parameter_is_a_model_error():
    with pytest.raises(ModelError):
        catalog_problem("zero", bogus=1.0)


@pytest.mark.parametrize("name", ["zero", "additive-brownian", "pure-jump-shift", "linear-jump-diffusion",
                                  "linear-driver", "nonlinear-driver"])
def test_oracle_relations_hold(name):
    defects = catalog_problem(name).oracle_relations()
    assert defects, "every catalog problem carries at least one oracle"
    assert max(defects.values()) < 1e-9


@pytest.mark.parametrize("name", ["additive-brownian", "pure-jump-shift", "linear-jump-diffusion"])
def test_catalog_models_validate(name):
    rep = validate_model(catalog_problem(name).model, (0.5, 1.5))
    assert rep.passed, rep.summary()


def test_mark_space_rejects_bad_rates():
    with pytest.raises(ModelError):
        MarkSpace(("a",), (0.0,))
    with pytest.raises(ModelError):
        MarkSpace(("a", "a"), (1.0, 1.0))
    with pytest.raises(ModelError):
        MarkSpace((), ())


def test_phi_inverse_roundtrip(rng):
    m = catalog_problem("linear-jump-diffusion").model
    x = rng.uniform(0.2, 2.0, (50, 1))
    t = rng.random(50)
    for e in range(m.n_marks):
        np.testing.assert_allclose(eval_phi_inverse(m, t, e, phi(m, t, e, x)), x, atol=1e-12)


def test_degenerate_jump_map_fails_validation():
    # x -> x - x = 0 collapses every point
    m = custom_jump_model(lambda t, e, x: -np.asarray(x, dtype=float))
    rep = validate_model(m, (0.5, 1.5), n_samples=16)
    assert not rep.passed


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_coefficient_is_reported():
    m = custom_jump_model(lambda t, e, x: np.log(np.asarray(x, dtype=float) - 1.0))
    rep = validate_model(m, (0.0, 0.5), n_samples=16)
    assert rep.errors and "not finite" in rep.errors[0]


def test_driver_linearity_flags():
    lin = catalog_problem("linear-jump-diffusion").model
    assert check_driver_linearity(lin) < 1e-12
    # nonlinear in y only, so still linear in (z, u)
    assert check_driver_linearity(catalog_problem("nonlinear-driver").model) < 1e-12
    quad = dataclasses.replace(lin, driver=lambda t, x, y, z, u: z[..., 0] ** 2, linear_in_zu=False)
    assert check_driver_linearity(quad) > 1e-3
