"""Kernel backend selection.

The hot numeric kernels exist twice: a numba-jitted implementation in
``_kernels_numba`` and a pure-numpy one in ``_kernels_numpy``. Both expose
the same function names and signatures. The active backend is picked once
at import from the ``SMALLSEG_BACKEND`` environment variable (``numba`` or
``numpy``) and can be switched at runtime with :func:`set_backend`, which
the test suite and the benchmark script use to compare the two paths.
"""

from __future__ import annotations

import os

from . import _kernels_numpy

_HAVE_NUMBA = False
try:
    from . import _kernels_numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    _kernels_numba = None

_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    name = os.environ.get("SMALLSEG_BACKEND", "").strip().lower()
    if name:
        if name not in _VALID:
            raise ValueError(f"SMALLSEG_BACKEND must be one of {_VALID}, got {name!r}")
        if name == "numba" and not _HAVE_NUMBA:
            raise ImportError("SMALLSEG_BACKEND=numba but numba is not importable")
        return name
    return "numba" if _HAVE_NUMBA else "numpy"


_ACTIVE = _initial_backend()


def active_backend() -> str:
    """Name of the backend currently in use."""
    return _ACTIVE


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (``numba`` or ``numpy``)."""
    global _ACTIVE
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ImportError("numba backend requested but numba is not importable")
    _ACTIVE = name


def kernels():
    """The module implementing the active backend's kernels."""
    return _kernels_numba if _ACTIVE == "numba" else _kernels_numpy
