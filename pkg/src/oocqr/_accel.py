"""Acceleration switch for the hot numeric kernels.

Every hot inner loop ships in two versions: a numba-compiled one and a
pure-numpy one. The active path is chosen once at import time:

* default: numba, when importable
* ``OOCQR_DISABLE_NUMBA=1`` (or ``true``/``yes``/``on``): pure numpy

Both versions stay importable so ``benchmarks/accel_bench.py`` can time
them against each other in a single process.
"""

from __future__ import annotations

import os


def _env_disabled() -> bool:
    flag = os.environ.get("OOCQR_DISABLE_NUMBA", "")
    return flag.strip().lower() in ("1", "true", "yes", "on")


try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and not _env_disabled()


def compile_or_none(func):
    """Return an njit-compiled version of func, or None without numba.

    Compilation is deferred to the first call, so importing this is cheap
    even when the compiled path is never used.
    """
    if HAVE_NUMBA:
        return _njit(cache=True)(func)
    return None


def pick(numba_version, numpy_version):
    """Select the active implementation for a kernel pair."""
    if NUMBA_ENABLED and numba_version is not None:
        return numba_version
    return numpy_version
