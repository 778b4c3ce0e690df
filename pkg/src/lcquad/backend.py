"""Selection between the compiled kernel backend and the numpy fallback.

The environment variable LCQUAD_BACKEND forces a choice: "cython" requires
the compiled extension (import error if missing), "numpy" forces the
fallback, "auto" (default) prefers the extension when available.
"""

from __future__ import annotations

import os

_backend = None
_backend_name = None


def _select():
    global _backend, _backend_name
    choice = os.environ.get("LCQUAD_BACKEND", "auto").lower()
    if choice not in ("auto", "cython", "numpy"):
        raise ValueError(f"LCQUAD_BACKEND must be auto, cython, or numpy, not {choice!r}")
    if choice in ("auto", "cython"):
        try:
            from . import _kernels_cy as mod
            _backend, _backend_name = mod, "cython"
            return
        except ImportError:
            if choice == "cython":
                raise
    from . import _kernels_np as mod
    _backend, _backend_name = mod, "numpy"


def get_backend():
    if _backend is None:
        _select()
    return _backend


def backend_name() -> str:
    if _backend is None:
        _select()
    return _backend_name
