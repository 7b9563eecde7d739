"""Backend switch for the compiled kernels.

``HERO_NUMBA=0`` forces the pure-numpy path; anything else (or unset) uses
numba when it can be imported.
"""
import os

_flag = os.environ.get("HERO_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    import numba  # noqa: F401
    _available = True
except ImportError:  # pragma: no cover - numba is a hard dep but keep the fallback honest
    _available = False

USE_NUMBA = _requested and _available


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``; identity decorator when numba is missing."""
    if not _available:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    import numba

    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
