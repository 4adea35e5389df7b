"""Selects the GRU recurrence backend at import time.

The compiled extension is used when it is importable. Setting the environment
variable ``RSMM_BACKEND=python`` forces the NumPy fallback.
"""

import os

from . import _gru_py

_requested = os.environ.get("RSMM_BACKEND", "auto").strip().lower()

try:
    from . import _gru_ext
except ImportError:  # extension not built
    _gru_ext = None

if _requested == "python" or _gru_ext is None:
    if _requested == "cython":
        raise ImportError("RSMM_BACKEND=cython but rsmm._gru_ext is not built")
    BACKEND = "python"
    _impl = _gru_py
else:
    BACKEND = "cython"
    _impl = _gru_ext

gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward


def available_backends():
    names = {"python": _gru_py}
    if _gru_ext is not None:
        names["cython"] = _gru_ext
    return names
