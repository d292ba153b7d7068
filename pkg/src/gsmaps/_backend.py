"""Kernel backend selection.

The compiled extension is used when it imports; ``GSMAPS_BACKEND=python``
forces the numpy fallback. ``GSMAPS_NUM_THREADS`` sets the default thread count.
"""

import os

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None


def _select(name=None):
    name = (name or os.environ.get("GSMAPS_BACKEND", "auto")).lower()
    if name == "python":
        return _fallback
    if name in ("auto", ""):
        return _core if _core is not None else _fallback
    if name == "compiled":
        if _core is None:
            raise ImportError("compiled backend requested but gsmaps._core is not built")
        return _core
    raise ValueError(f"unknown backend {name!r}; expected auto, compiled or python")


kernels = _select()
NAME = "compiled" if kernels is _core else "python"


def get(name=None):
    """Kernel module for ``name`` ('auto', 'compiled', 'python'); None means the import-time choice."""
    return kernels if name is None else _select(name)


def default_threads() -> int:
    env = os.environ.get("GSMAPS_NUM_THREADS")
    if env:
        return max(1, int(env))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))
