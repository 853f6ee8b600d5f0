"""Kernel selection: compiled Cython core when importable, numpy fallback otherwise.

Set ``DRIFTBLEND_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
eval_slabs = _pykernels.eval_slabs

if os.environ.get("DRIFTBLEND_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        eval_slabs = _ckernels.eval_slabs
        BACKEND = "cython"

__all__ = ["BACKEND", "eval_slabs"]
