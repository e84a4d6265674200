"""JIT plumbing: numba acceleration with a pure-Python escape hatch.

Hot kernels in this package are written in nopython-compatible style and
decorated with :func:`maybe_njit`.  Setting the environment variable
``BRCL_DISABLE_NUMBA=1`` (before import) selects the uncompiled fallback
path; ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

_flag = os.environ.get("BRCL_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _flag not in ("", "0", "false", "no")

if not NUMBA_DISABLED:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_DISABLED = True

NUMBA_ENABLED = not NUMBA_DISABLED


def maybe_njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if NUMBA_ENABLED:
        return _njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]

    def wrap(func):
        return func

    return wrap
