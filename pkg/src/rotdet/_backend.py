"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
pure-Python ``_pykernels`` module. Set ``ROTDET_PURE_PYTHON=1`` to force
the fallback.
"""
import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("ROTDET_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using pure-Python fallback")
        _compiled = None

kernels = _compiled if _compiled is not None else _pykernels
NAME = "compiled" if _compiled is not None else "python"


def available():
    """Names of the backends importable in this process."""
    return ["compiled", "python"] if _compiled is not None else ["python"]


def get(name=None):
    """Return the kernel module ``name`` ("compiled" or "python"); default is the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
