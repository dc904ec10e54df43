"""Kernel backend selection.

The hot per-pixel loops are compiled with numba when it is importable and
``HINET_DISABLE_NUMBA`` is unset (or ``0``).  Otherwise every kernel falls back
to a pure-numpy implementation with identical semantics.
``HINET_THREADS`` caps numba's thread pool.
"""

import os

_flag = os.environ.get("HINET_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

# the bundled TBB is too old for numba; skip straight to the portable layer
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    if _disabled:
        raise ImportError("numba disabled by HINET_DISABLE_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def _apply_thread_cap():
    threads = os.environ.get("HINET_THREADS")
    if not threads or not HAVE_NUMBA:
        return
    try:
        n = int(threads)
    except ValueError:
        return
    if n >= 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


_apply_thread_cap()
