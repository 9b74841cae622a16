"""Log-log order fits for refinement studies on nested noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# errors at or below this are rounding noise; a study whose errors all sit
# there has an exact scheme and no measurable order
EXACT_FLOOR = 1e-12


@dataclass
class OrderFit:
    dts: np.ndarray
    errors: np.ndarray
    slope: float
    exact: bool

    def passes(self, min_order: float) -> bool:
        return self.exact or (np.isfinite(self.slope) and self.slope >= min_order)

    def as_dict(self) -> dict:
        return {
            "dts": [float(v) for v in self.dts],
            "errors": [float(v) for v in self.errors],
            "slope": None if not np.isfinite(self.slope) else float(self.slope),
            "exact": bool(self.exact),
        }

    def describe(self) -> str:
        if self.exact:
            return f"exact (max error {np.max(self.errors):.3g} <= {EXACT_FLOOR:g})"
        return f"slope {self.slope:.3f}"


def fit_order(dts, errors, floor: float = EXACT_FLOOR) -> OrderFit:
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if dts.shape != errors.shape or dts.size < 2:
        raise ValueError("need at least two (dt, error) pairs")
    if np.all(errors <= floor):
        return OrderFit(dts, errors, float("nan"), True)
    if np.any(errors <= 0):
        return OrderFit(dts, errors, float("nan"), False)
    slope = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    return OrderFit(dts, errors, slope, False)


def dyadic_factors(levels: int) -> list:
    """Coarsening factors 1, 2, 4, ... for ``levels`` grids."""
    return [2**i for i in range(levels)]
