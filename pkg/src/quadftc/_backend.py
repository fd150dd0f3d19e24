"""Kernel backend selection.

Hot loops are compiled with numba when it is importable and not disabled via
``QUADFTC_NUMBA=0``; otherwise the vectorized numpy implementations run.
Both backends share identical arithmetic ordering.
"""

import os
import warnings

_FLAG = os.environ.get("QUADFTC_NUMBA", "1").strip().lower()
USE_NUMBA = _FLAG not in ("0", "false", "no", "off")

try:
    from numba import njit
except ImportError:  # pragma: no cover
    if USE_NUMBA:
        warnings.warn("numba not importable, falling back to numpy kernels")
    USE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def deco(fn):
            return fn

        return deco


BACKEND = "numba" if USE_NUMBA else "numpy"
