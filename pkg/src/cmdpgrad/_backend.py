"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
pure-Python ``_pykernels`` module is used.  ``CMDPGRAD_BACKEND=python``
forces the fallback (useful for testing and benchmarking).
"""
import os

from . import _pykernels

_forced = os.environ.get("CMDPGRAD_BACKEND", "").strip().lower()

kernels = _pykernels
BACKEND = "python"

if _forced != "python":
    try:
        from . import _kernels as _ck  # type: ignore[attr-defined]
    except ImportError:
        if _forced == "cython":
            raise
    else:
        kernels = _ck
        BACKEND = "cython"


def get_kernels(name=None):
    """Return a kernel module by name (``"cython"`` or ``"python"``); default is the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _kernels as ck  # type: ignore[attr-defined]

        return ck
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    out = ["python"]
    try:
        from . import _kernels  # noqa: F401  # type: ignore[attr-defined]
    except ImportError:
        return out
    return ["cython"] + out
