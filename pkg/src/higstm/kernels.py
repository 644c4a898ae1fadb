"""Scan kernel selection.

The compiled ``_scan`` extension is used when it was built; otherwise the
numpy implementation in ``_scan_py``. Set ``HIGSTM_PURE_PYTHON=1`` to force
the fallback.
"""
import os

import numpy as np

from . import _scan_py

BACKEND = "python"
_impl = _scan_py
if os.environ.get("HIGSTM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _scan as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def scan_forward(abar, bbar, c, x):
    return _impl.scan_forward(_c(abar), _c(bbar), _c(c), _c(x))


def scan_backward(abar, bbar, c, x, h, gy):
    return _impl.scan_backward(_c(abar), _c(bbar), _c(c), _c(x), _c(h), _c(gy))


def selective_forward(delta, A, B, C, x):
    return _impl.selective_forward(_c(delta), _c(A), _c(B), _c(C), _c(x))


def selective_backward(delta, A, B, C, x, saved, gy):
    return _impl.selective_backward(_c(delta), _c(A), _c(B), _c(C), _c(x), saved, _c(gy))


def backends():
    """Available ``name -> module`` pairs, fallback first."""
    out = {"python": _scan_py}
    try:
        from . import _scan as _compiled
    except ImportError:
        return out
    out["cython"] = _compiled
    return out
