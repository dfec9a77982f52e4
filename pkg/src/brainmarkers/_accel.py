"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` kernel and a vectorised numpy
path. ``BRAINMARKERS_NUMBA=0`` (or a missing numba install) routes every
public function through the numpy path. The flag is read on each call so
tests can flip it with ``monkeypatch.setenv``.
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "BRAINMARKERS_NUMBA"


def use_numba() -> bool:
    if not HAVE_NUMBA:
        return False
    return os.environ.get(ENV_FLAG, "1").strip().lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)
