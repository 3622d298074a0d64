"""Kernel backend selection.

Hot loops are compiled with numba when it is importable and not disabled.
Set ``ADVMLM_NUMBA=0`` in the environment to force the pure-numpy path.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_ENV_FLAG = "ADVMLM_NUMBA"

_use_numba = numba is not None and os.environ.get(_ENV_FLAG, "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(func):
    """Compile ``func`` with numba if available, otherwise return it unchanged."""
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def numba_available():
    return numba is not None


def using_numba():
    return _use_numba


def set_backend(name):
    """Switch between ``"numba"`` and ``"numpy"`` kernels at runtime."""
    global _use_numba
    if name == "numba":
        if numba is None:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend_name():
    return "numba" if _use_numba else "numpy"
