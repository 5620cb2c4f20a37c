"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set ``LIVERPERF_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
advect_step = _kernels_py.advect_step
network_step = _kernels_py.network_step

if not os.environ.get("LIVERPERF_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        BACKEND = "cython"
        advect_step = _compiled.advect_step
        network_step = _compiled.network_step


def backends():
    """Available ``(name, module)`` pairs, compiled first."""
    out = []
    try:
        from . import _kernels as _compiled

        out.append(("cython", _compiled))
    except ImportError:
        pass
    out.append(("python", _kernels_py))
    return out
