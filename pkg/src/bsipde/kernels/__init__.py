"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports. Setting the environment
variable ``BSIPDE_PURE_PYTHON=1`` forces the numpy implementations.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("BSIPDE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

fd_advance = _impl.fd_advance
uniform_interp = _impl.uniform_interp
interp_rows = _impl.interp_rows
linear_sde_paths = _impl.linear_sde_paths

__all__ = [
    "BACKEND",
    "fd_advance",
    "uniform_interp",
    "interp_rows",
    "linear_sde_paths",
]
