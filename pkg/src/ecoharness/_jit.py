"""Optional numba acceleration.

Set ``ECOHARNESS_NO_NUMBA=1`` to force the pure-numpy code paths, e.g. to
compare both in ``benchmarks/bench_kernels.py`` or when numba is broken on a
platform.
"""

import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def decorate(f):
        return f

    return decorate


def _want_numba():
    flag = os.environ.get("ECOHARNESS_NO_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


def _have_numba():
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


# True when the numba kernels are active
USE_NUMBA = _want_numba() and _have_numba()

if USE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit
