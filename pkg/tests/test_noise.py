import numpy as np
import pytest

from bsipde.model import MarkSpace
from bsipde.noise import (NoiseError, TimeGrid, build_event_grid, coarsen_noise, generate_ensemble, generate_noise)

MARKS = MarkSpace(("a", "b"), (1.5, 0.5))


def test_grid_validation():
    with pytest.raises(NoiseError):
        TimeGrid(1.0, 0)
    with pytest.raises(NoiseError):
        TimeGrid(-1.0, 4)
    g = TimeGrid(1.0, 8)
    assert g.nodes[-1] == 1.0 and g.coarsen(4).steps == 2
    with pytest.raises(NoiseError):
        g.coarsen(3)


def test_same_seed_same_path_regardless_of_ensemble():
    g = TimeGrid(1.0, 16)
    a = generate_ensemble(g, MARKS, 7, 10)
    b = generate_ensemble(g, MARKS, 7, [3, 9])
    assert a[3].same_content(b[0]) and a[9].same_content(b[1])
    c = generate_noise(g, MARKS, 8, 3)
    assert not a[3].same_content(c)


def test_coarsening_sums_increments_and_keeps_jumps():
    b = generate_noise(TimeGrid(1.0, 64), MARKS, 1, 0)
    c = coarsen_noise(b, 8)
    np.testing.assert_allclose(c.dW.sum(axis=0), b.dW.sum(axis=0), atol=1e-14)
    np.testing.assert_allclose(c.brownian_path()[-1], b.brownian_path()[-1], atol=1e-14)
    np.testing.assert_array_equal(c.jump_times, b.jump_times)
    np.testing.assert_allclose(c.brownian_path(), b.brownian_path()[::8], atol=1e-14)


def test_jump_statistics():
    g = TimeGrid(1.0, 4)
    bs = generate_ensemble(g, MARKS, 3, 4000)
    counts = np.array([b.jump_counts()[-1] for b in bs])
    np.testing.assert_allclose(counts.mean(axis=0), [1.5, 0.5], atol=0.1)
    dw = np.array([b.dW.sum() for b in bs])
    assert abs(dw.var() - 1.0) < 0.1


def test_event_grid_layout():
    g = TimeGrid(1.0, 8)
    bs = generate_ensemble(g, MARKS, 2, 6)
    ev = build_event_grid(bs)
    np.testing.assert_allclose(ev.times[:, ev.base_nodes], np.broadcast_to(g.nodes, (6, 9)))
    # W at base nodes is the Brownian path
    for p, b in enumerate(bs):
        np.testing.assert_allclose(ev.W[p, ev.base_nodes], b.brownian_path(), atol=1e-14)
        np.testing.assert_array_equal(ev.counts(ev.base_nodes)[p], b.jump_counts())
    np.testing.assert_allclose(ev.dt.sum(axis=1), 1.0)
    assert np.all(ev.dt >= 0.0)
    # a jump at the end of a substep is excluded from the left count
    p, k = np.argwhere(ev.marks >= 0)[0]
    c = ev.counts([k + 1])[p, 0]
    cl = ev.counts([k + 1], left=True)[p, 0]
    assert (c - cl).sum() == 1


def test_mixed_grids_are_rejected():
    a = generate_noise(TimeGrid(1.0, 8), MARKS, 0, 0)
    b = generate_noise(TimeGrid(1.0, 4), MARKS, 0, 1)
    with pytest.raises(NoiseError):
        build_event_grid([a, b])
