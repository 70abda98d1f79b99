"""Kernel backend selection.

The compiled extension is used when it was built; set ``XLTAVG_PURE_PYTHON=1``
to force the numpy fallback. Both backends give bit-identical results.
"""
from __future__ import annotations

import os

if os.environ.get("XLTAVG_PURE_PYTHON", "").lower() in ("1", "true", "yes"):
    from xltavg import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from xltavg import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        from xltavg import _kernels_py as _impl

        BACKEND = "python"

splitmix64_fill = _impl.splitmix64_fill
fisher_yates = _impl.fisher_yates
accumulate = _impl.accumulate

__all__ = ["BACKEND", "splitmix64_fill", "fisher_yates", "accumulate"]
