import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsipde import kernels
from bsipde.kernels import _pykernels

try:
    from bsipde.kernels import _ckernels
except ImportError:  # compiled core not built
    _ckernels = None

needs_c = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def test_backend_flag_forces_fallback():
    env = dict(os.environ, BSIPDE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from bsipde import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_c
@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(1, 5), st.floats(0.01, 1.0), st.integers(0, 2**31 - 1))
def test_fd_advance_twins(m, rows, h, seed):
    r = np.random.default_rng(seed)
    u, c2, c1 = r.standard_normal((3, rows, m))
    a = _pykernels.fd_advance(u, h, c2, c1)
    b = _ckernels.fd_advance(u, h, c2, c1)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


@needs_c
@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_interp_twins(m, rows, q, seed):
    r = np.random.default_rng(seed)
    vals = r.standard_normal((rows, m))
    pts = r.uniform(-0.5, m + 0.5, (rows, q)) * 0.1
    a = _pykernels.uniform_interp(vals, 0.0, 0.1, pts)
    b = _ckernels.uniform_interp(vals, 0.0, 0.1, pts)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-13, atol=1e-13)
    np.testing.assert_array_equal(a[1], b[1])
    xp = np.sort(r.standard_normal((rows, m)), axis=1) + np.arange(m) * 1e-3
    a = _pykernels.interp_rows(xp, vals, pts)
    b = _ckernels.interp_rows(xp, vals, pts)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(a[1], b[1])


@needs_c
def test_linear_sde_twins(rng):
    P, K, n = 5, 40, 3
    c0 = rng.standard_normal((P, n))
    A = 0.1 * rng.standard_normal((n, n))
    B = 0.1 * rng.standard_normal((1, n, n))
    J = 0.1 * rng.standard_normal((2, n, n))
    dt = np.full((P, K), 0.01)
    dW = 0.1 * rng.standard_normal((P, K, 1))
    marks = np.where(rng.random((P, K)) < 0.1, rng.integers(0, 2, (P, K)), -1).astype(np.int64)
    a = _pykernels.linear_sde_paths(c0, A, B, J, dt, dW, marks)
    b = _ckernels.linear_sde_paths(c0, A, B, J, dt, dW, marks)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-14)


def test_interp_exact_on_linear_data():
    x = np.linspace(0.0, 1.0, 11)
    vals = (2.0 * x + 1.0)[None]
    pts = np.array([[0.05, 0.5, 0.999, 1.2]])
    out, ext = kernels.uniform_interp(vals, 0.0, 0.1, pts)
    np.testing.assert_allclose(out, 2.0 * pts + 1.0, atol=1e-14)
    assert ext.tolist() == [[False, False, False, True]]


def test_fd_advance_second_difference_of_quadratic():
    x = np.linspace(0.0, 1.0, 21)
    u = (x**2)[None]
    out = kernels.fd_advance(u, x[1] - x[0], np.ones_like(u), np.zeros_like(u))
    np.testing.assert_allclose(out - u, 2.0, atol=1e-9)
