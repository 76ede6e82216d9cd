"""Pick the compiled kernels when available.

Set ``HETLB_PURE_PYTHON=1`` to force the pure-Python loops.
"""
from __future__ import annotations

import os

from . import _pykernels

kernels = _pykernels
COMPILED = False

if os.environ.get("HETLB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:  # extension not built
        kernels = _pykernels


def get(name: str = "auto"):
    """Return a kernel module by name: ``"auto"``, ``"compiled"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        from . import _kernels

        return _kernels
    return kernels
