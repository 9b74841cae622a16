"""Reproducible Brownian and marked Poisson noise on a shared base grid.

Every path draws from its own counter-based stream keyed by
``(master_seed, path_index, stream_kind)``, so a path's content does not
depend on which worker generated it or in which order.

The Brownian value at each jump time is sampled once, by a bridge inside the
finest base step, and stored with the jump. Coarsening sums base increments and
keeps the jumps and their Brownian values, so coarse and fine runs see the
same Brownian path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import MarkSpace

STREAM_BROWNIAN = 0
STREAM_JUMP_TIMES = 1
STREAM_MARKS = 2
STREAM_BRIDGE = 3


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise NoiseError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise NoiseError(f"step count must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.steps % factor:
            raise NoiseError(f"factor {factor} does not divide {self.steps} steps")
        return TimeGrid(self.horizon, self.steps // factor)

    def step_of(self, tau) -> np.ndarray:
        """Index k of the base step (t_k, t_{k+1}] containing tau."""
        k = np.searchsorted(self.nodes, tau, side="left") - 1
        return np.clip(k, 0, self.steps - 1)


def _generator(master_seed: int, path_index: int, kind: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(path_index), int(kind)))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class NoiseBundle:
    grid: TimeGrid
    marks: MarkSpace
    master_seed: int
    path_index: int
    dW: np.ndarray  # (N, d)
    jump_times: np.ndarray  # (J,)
    jump_marks: np.ndarray  # (J,) integer mark indices
    jump_w: np.ndarray  # (J, d) Brownian value at each jump time

    def __post_init__(self):
        for name in ("dW", "jump_times", "jump_marks", "jump_w"):
            getattr(self, name).setflags(write=False)

    @property
    def path_id(self) -> int:
        return self.path_index

    @property
    def dim_brownian(self) -> int:
        return self.dW.shape[1]

    @property
    def jump_events(self) -> list:
        return list(zip(self.jump_times.tolist(), self.jump_marks.tolist()))

    def brownian_path(self) -> np.ndarray:
        """W at the base nodes, shape (N+1, d)."""
        w = np.zeros((self.grid.steps + 1, self.dim_brownian))
        np.cumsum(self.dW, axis=0, out=w[1:])
        return w

    def jump_counts(self) -> np.ndarray:
        """Per-mark jump counts at each base node, shape (N+1, E)."""
        counts = np.zeros((self.grid.steps + 1, self.marks.size), dtype=np.int64)
        k = self.grid.step_of(self.jump_times)
        for kk, e in zip(k, self.jump_marks):
            counts[kk + 1 :, e] += 1
        return counts

    def increments_dN(self) -> np.ndarray:
        """Per-mark jump counts inside each base step, shape (N, E)."""
        dn = np.zeros((self.grid.steps, self.marks.size))
        k = self.grid.step_of(self.jump_times)
        np.add.at(dn, (k, self.jump_marks), 1.0)
        return dn

    def same_content(self, other: "NoiseBundle") -> bool:
        return (
            self.grid == other.grid
            and np.array_equal(self.dW, other.dW)
            and np.array_equal(self.jump_times, other.jump_times)
            and np.array_equal(self.jump_marks, other.jump_marks)
            and np.array_equal(self.jump_w, other.jump_w)
        )


def _draw_jump_times(rng: np.random.Generator, rate: float, horizon: float) -> np.ndarray:
    times = []
    total = 0.0
    # draw inter-arrival times in blocks until the horizon is passed
    block = max(8, int(2 * rate * horizon) + 8)
    while True:
        gaps = rng.exponential(1.0 / rate, size=block)
        arr = total + np.cumsum(gaps)
        times.append(arr[arr <= horizon])
        if arr[-1] > horizon:
            break
        total = arr[-1]
    return np.concatenate(times)


def generate_noise(grid: TimeGrid, marks: MarkSpace, master_seed: int, path_index: int, dim_brownian: int = 1) -> NoiseBundle:
    """Brownian increments and the marked jump stream of one path."""
    if dim_brownian < 1:
        raise NoiseError("dim_brownian must be at least 1")
    n, dt = grid.steps, grid.dt
    dW = _generator(master_seed, path_index, STREAM_BROWNIAN).standard_normal((n, dim_brownian)) * np.sqrt(dt)

    times = _draw_jump_times(_generator(master_seed, path_index, STREAM_JUMP_TIMES), marks.total_intensity, grid.horizon)
    times = times[times > 0.0]
    mk = _generator(master_seed, path_index, STREAM_MARKS).choice(marks.size, size=times.size, p=marks.probabilities)
    # exact ties: keep the first in mark order, as the event set is a.s. tie-free
    order = np.lexsort((mk, times))
    times, mk = times[order], mk[order]
    if times.size > 1:
        keep = np.concatenate(([True], np.diff(times) > 0.0))
        times, mk = times[keep], mk[keep]

    jw = _bridge_values(_generator(master_seed, path_index, STREAM_BRIDGE), grid, dW, times)
    return NoiseBundle(grid, marks, int(master_seed), int(path_index), dW, times, mk.astype(np.int64), jw)


def _bridge_values(rng: np.random.Generator, grid: TimeGrid, dW: np.ndarray, times: np.ndarray) -> np.ndarray:
    d = dW.shape[1]
    out = np.empty((times.size, d))
    if times.size == 0:
        return out
    nodes = grid.nodes
    w = np.zeros((grid.steps + 1, d))
    np.cumsum(dW, axis=0, out=w[1:])
    steps = grid.step_of(times)
    z = rng.standard_normal((times.size, d))
    prev_k = -1
    s0 = 0.0
    w0 = None
    for j, (tau, k) in enumerate(zip(times, steps)):
        if k != prev_k:
            s0, w0 = nodes[k], w[k]
            prev_k = k
        s1, w1 = nodes[k + 1], w[k + 1]
        span = s1 - s0
        frac = (tau - s0) / span if span > 0 else 1.0
        var = max((tau - s0) * (s1 - tau) / span, 0.0) if span > 0 else 0.0
        out[j] = w0 + frac * (w1 - w0) + np.sqrt(var) * z[j]
        s0, w0 = tau, out[j]
    return out


def generate_ensemble(grid: TimeGrid, marks: MarkSpace, master_seed: int, paths: int | Sequence[int], dim_brownian: int = 1) -> list:
    idx = range(paths) if isinstance(paths, (int, np.integer)) else paths
    return [generate_noise(grid, marks, master_seed, i, dim_brownian) for i in idx]


def coarsen_noise(bundle: NoiseBundle, factor: int) -> NoiseBundle:
    """Same path on a grid with ``factor`` times fewer steps."""
    if int(factor) != factor or factor < 1:
        raise NoiseError(f"coarsening factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return bundle
    grid = bundle.grid.coarsen(factor)
    dW = bundle.dW.reshape(grid.steps, factor, -1).sum(axis=1)
    return NoiseBundle(grid, bundle.marks, bundle.master_seed, bundle.path_index, dW,
                       bundle.jump_times.copy(), bundle.jump_marks.copy(), bundle.jump_w.copy())


# ---------------------------------------------------------------- event grid


@dataclass
class EventGrid:
    """Jump-adapted grids of a batch of paths, padded to a common layout.

    Base step k is split into ``J_k + 1`` substeps, where ``J_k`` is the most
    jumps any path of the batch has in that step. For a path with ``m`` jumps
    there, substep ``j < m`` ends at its (j+1)-th jump, substep ``m`` ends at
    ``t_{k+1}``, and the remaining substeps are empty (zero length, zero
    increment). ``marks[p, i]`` is the mark of the jump at the end of substep
    i, or -1. Node ``base_nodes[k]`` of the padded layout is base node k.
    """

    grid: TimeGrid
    marks_space: MarkSpace
    path_ids: np.ndarray  # (P,)
    times: np.ndarray  # (P, K+1)
    dt: np.ndarray  # (P, K)
    dW: np.ndarray  # (P, K, d)
    W: np.ndarray  # (P, K+1, d)
    marks: np.ndarray  # (P, K) int
    base_nodes: np.ndarray  # (N+1,) padded index of each base node
    step_of_substep: np.ndarray = field(default=None)  # (K,)

    @property
    def n_paths(self) -> int:
        return self.times.shape[0]

    @property
    def n_substeps(self) -> int:
        return self.dt.shape[1]

    def counts(self, nodes=None, left: bool = False) -> np.ndarray:
        """Per-mark jump counts at padded nodes, shape (P, len(nodes), E).

        With ``left`` the jump at the node itself is excluded.
        """
        if nodes is None:
            nodes = np.arange(self.n_substeps + 1)
        nodes = np.asarray(nodes)
        E = self.marks_space.size
        out = np.zeros((self.n_paths, nodes.size, E), dtype=np.int64)
        for e in range(E):
            c = np.zeros((self.n_paths, self.n_substeps + 1), dtype=np.int32)
            np.cumsum(self.marks == e, axis=1, out=c[:, 1:])
            out[:, :, e] = c[:, nodes]
            if left:
                at = np.zeros_like(c, dtype=bool)
                at[:, 1:] = self.marks == e
                out[:, :, e] -= at[:, nodes]
        return out

    def path_nodes(self, p: int) -> np.ndarray:
        """Padded indices forming path p's own jump-adapted grid (duplicates removed)."""
        keep = np.concatenate(([True], self.dt[p] > 0.0))
        # a zero-length substep ending in a jump can only follow the step's start
        return np.nonzero(keep)[0]

    def subset(self, rows) -> "EventGrid":
        rows = np.asarray(rows)
        return EventGrid(self.grid, self.marks_space, self.path_ids[rows], self.times[rows], self.dt[rows],
                         self.dW[rows], self.W[rows], self.marks[rows], self.base_nodes, self.step_of_substep)


def build_event_grid(bundles: Sequence[NoiseBundle], time_offset: float = 0.0) -> EventGrid:
    """Padded jump-adapted grid of a batch of bundles sharing one base grid."""
    if len(bundles) == 0:
        raise NoiseError("need at least one bundle")
    grid = bundles[0].grid
    marks = bundles[0].marks
    d = bundles[0].dim_brownian
    for b in bundles:
        if b.grid != grid or b.dim_brownian != d:
            raise NoiseError("all bundles of a batch must share the base grid and Brownian dimension")
    P, N = len(bundles), grid.steps
    nodes = grid.nodes + time_offset
    # jumps per (path, base step)
    steps_of = [grid.step_of(b.jump_times) for b in bundles]
    per_step = np.zeros((P, N), dtype=np.int64)
    for p, ks in enumerate(steps_of):
        np.add.at(per_step[p], ks, 1)
    jmax = per_step.max(axis=0)  # J_k
    sub_per_step = jmax + 1
    base_nodes = np.zeros(N + 1, dtype=np.int64)
    np.cumsum(sub_per_step, out=base_nodes[1:])
    K = int(base_nodes[-1])
    step_of_sub = np.repeat(np.arange(N), sub_per_step)

    times = np.empty((P, K + 1))
    W = np.empty((P, K + 1, d))
    dW = np.zeros((P, K, d))
    mk = np.full((P, K), -1, dtype=np.int64)
    # default layout: substep J_k of each base step carries the whole step
    last_sub = base_nodes[1:] - 1
    for p, b in enumerate(bundles):
        wb = b.brownian_path()
        # node times: nodes inside step k sit at t_k until filled by jumps, then at t_{k+1}
        tp = np.repeat(nodes[:-1], sub_per_step)
        wp = np.repeat(wb[:-1], sub_per_step, axis=0)
        dwp = np.zeros((K, d))
        dwp[last_sub] = b.dW
        ks = steps_of[p]
        if b.jump_times.size:
            # position of each jump within its step
            first = np.searchsorted(ks, ks, side="left")
            pos = np.arange(ks.size) - first
            sub_idx = base_nodes[ks] + pos  # substep that ends at the jump
            tp_end = b.jump_times + time_offset
            # substep j < m ends at jump j; fill node j+1 of the step
            times_node = sub_idx + 1
            tp[times_node[times_node < K]] = tp_end[times_node < K]
            mk[p, sub_idx] = b.jump_marks
            for k in np.unique(ks):
                sel = np.nonzero(ks == k)[0]
                m = sel.size
                start = base_nodes[k]
                w_prev = wb[k]
                for j, jj in enumerate(sel):
                    dwp[start + j] = b.jump_w[jj] - w_prev
                    w_prev = b.jump_w[jj]
                    wp[start + j + 1] = b.jump_w[jj]
                # nodes after the last jump stay at the last jump until the step closes
                for j in range(m + 1, sub_per_step[k]):
                    tp[start + j] = tp_end[sel[-1]]
                    wp[start + j] = b.jump_w[sel[-1]]
                # the closing substep: move from the last jump to t_{k+1}
                dwp[last_sub[k]] = wb[k + 1] - w_prev
        times[p, :K] = tp
        times[p, K] = nodes[-1]
        W[p, :K] = wp
        W[p, K] = wb[-1]
        dW[p] = dwp
    dt = np.diff(times, axis=1)
    dt[dt < 0.0] = 0.0
    return EventGrid(grid, marks, np.array([b.path_index for b in bundles]), times, dt, dW, W, mk, base_nodes, step_of_sub)
