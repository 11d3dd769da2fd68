"""Kernel backend selection.

Two interchangeable kernel sets: a Cython extension (`_core`) and a NumPy
fallback (`pure`).  Selection happens on first use, from the
``NARROWBERT_BACKEND`` env var (``compiled``, ``pure``, or ``auto``); tests
and the benchmark harness can switch explicitly with `use_backend`.
"""

import os

from . import pure

_active = None


def _load_compiled():
    try:
        from . import compiled
    except ImportError:
        return None
    return compiled


def available_backends():
    names = ["pure"]
    if _load_compiled() is not None:
        names.insert(0, "compiled")
    return names


def use_backend(name):
    """Force a backend. name: 'compiled', 'pure', or 'auto'."""
    global _active
    if name in (None, "auto"):
        _active = _load_compiled() or pure
    elif name == "pure":
        _active = pure
    elif name == "compiled":
        mod = _load_compiled()
        if mod is None:
            raise RuntimeError("compiled backend requested but extension not built")
        _active = mod
    else:
        raise ValueError(f"unknown backend {name!r}")
    return _active


def get():
    """The active backend module, selecting one on first call."""
    global _active
    if _active is None:
        use_backend(os.environ.get("NARROWBERT_BACKEND", "auto"))
    return _active
