"""Hot loops, compiled when possible.

The compiled extension is used when it imports; otherwise the pure-Python
twin is selected.  Set ``SPINAMP_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _bloch_py

if os.environ.get("SPINAMP_PURE_PYTHON", "") not in ("", "0"):
    rk4_bloch = _bloch_py.rk4_bloch
    BACKEND = "python"
else:
    try:
        from ._bloch import rk4_bloch  # type: ignore[import-not-found]
        BACKEND = "cython"
    except ImportError:
        rk4_bloch = _bloch_py.rk4_bloch
        BACKEND = "python"

__all__ = ["rk4_bloch", "BACKEND"]
