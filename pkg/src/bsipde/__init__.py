"""Jump BSDEs, inverse stochastic flows and backward stochastic integro-PDEs.

Modules:
    model         coefficient models, mark spaces, catalog problems with closed forms
    noise         reproducible Brownian and Poisson noise, nested coarsening, event grids
    sde_flow      jump-adapted Euler flows x -> X_t(x)
    inverse_flow  three inverse-flow constructions (grid, SIPDE, backward SDE)
    ito_wentzell  discrete check of the Ito-Wentzell formula for jump processes
    galerkin      Galerkin systems, energy identity, coercivity probe
    bsde          regression BSDE and variational BSDE solvers, oracles, estimates
    feynman_kac   composition into (p, q, r), residual of the backward equation, PIDE reference
    cli           experiment runner
"""

from .kernels import BACKEND
from .model import available_problems, catalog_problem
from .noise import TimeGrid, coarsen_noise, generate_ensemble

__version__ = "0.1.0"

__all__ = ["BACKEND", "TimeGrid", "available_problems", "catalog_problem", "coarsen_noise",
           "generate_ensemble", "__version__"]
