"""Numba detection.

Set ``VODKIT_DISABLE_NUMBA=1`` to force the pure-numpy kernels. Numba is
then never imported.
"""
import os
import warnings

ENV_FLAG = "VODKIT_DISABLE_NUMBA"


def _disabled_by_env():
    return os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


if _disabled_by_env():
    HAVE_NUMBA = False
    njit = None
else:
    try:
        from numba import njit
        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover
        warnings.warn("numba could not be imported; falling back to numpy kernels")
        HAVE_NUMBA = False
        njit = None
