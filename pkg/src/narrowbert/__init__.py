"""narrowbert: a transformer-encoder lab for computation narrowing.

Kept import-light on purpose: the CLI sets BLAS thread environment
variables before anything NumPy-backed loads, so the heavy modules
(`model`, `numerics`, ...) are imported lazily by their users.
"""

from .layout import Atom, Layout, LayoutError, parse_layout, render_layout, validate_layout

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "Layout",
    "LayoutError",
    "parse_layout",
    "render_layout",
    "validate_layout",
    "__version__",
]
