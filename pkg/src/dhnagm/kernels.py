"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``DHNAGM_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementations are used.
"""

from __future__ import annotations

import os

from . import _pykernels

_force_python = os.environ.get("DHNAGM_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_python:
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

SINGULAR = _pykernels.SINGULAR

simulate_side = _impl.simulate_side
irls_loop = _impl.irls_loop
wls_solve = _impl.wls_solve


def available_backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
