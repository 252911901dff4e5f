"""Kernel dispatch: the compiled extension when importable, else pure Python.

Set ``MOLE_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("MOLE_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

jacobi_sweep = _impl.jacobi_sweep
bpe_merge = _impl.bpe_merge

__all__ = ["BACKEND", "jacobi_sweep", "bpe_merge", "_pykernels"]
