"""Numba switch.

Hot kernels are compiled with numba unless ``GRL_NUMBA=0`` is set in the
environment (or numba cannot be imported), in which case the pure-numpy
implementations in :mod:`grl.tensor.kernels` are used instead.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("GRL_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise.

    Compilation does not depend on ``GRL_NUMBA``; that flag only selects which
    implementation the dispatchers call, so benchmarks can time both.
    """
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(func):
        return func

    return wrapper


def set_threads(n):
    """Cap numba's thread pool. Kernels are serial, so results never depend on it."""
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
