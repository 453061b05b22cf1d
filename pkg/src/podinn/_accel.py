"""Optional numba acceleration.

Hot kernels are decorated with :func:`njit`.  When numba is missing, or the
environment variable ``PODINN_DISABLE_NUMBA`` is set to a truthy value, the
decorator is the identity and the kernels run as plain numpy/python code.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}


def _numba_requested() -> bool:
    return os.environ.get("PODINN_DISABLE_NUMBA", "").strip().lower() in _FALSY


try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

NUMBA_ENABLED = _numba is not None and _numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` or a no-op, depending on NUMBA_ENABLED."""
    if NUMBA_ENABLED:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap


def py_func(fn):
    """Underlying python function of a (possibly) jitted kernel."""
    return getattr(fn, "py_func", fn)
