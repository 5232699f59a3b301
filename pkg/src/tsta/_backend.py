"""Kernel backend selection.

Hot loops are compiled with numba when it is importable. Setting
``TSTA_DISABLE_NUMBA=1`` forces the pure-numpy fallback everywhere, which is
also what the backend benchmark compares against.
"""
import os

_TRUTHY = {"1", "true", "yes", "on"}

try:
    import numba

    HAS_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the bundled TBB is often too old; prefer OpenMP so parallel kernels
        # do not warn on first launch
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def numba_enabled():
    if not HAS_NUMBA:
        return False
    return os.environ.get("TSTA_DISABLE_NUMBA", "0").strip().lower() not in _TRUTHY


def resolve_backend(backend=None):
    """Return ``"numba"`` or ``"numpy"`` for an explicit or env-derived choice."""
    if backend is None:
        return "numba" if numba_enabled() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


def default_threads():
    raw = os.environ.get("TSTA_THREADS")
    if raw is None:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("TSTA_THREADS must be >= 1")
    return n


def set_threads(n):
    """Pin numba and BLAS thread pools to ``n`` threads.

    Returns the threadpoolctl limiter so callers may keep it alive; BLAS
    limits revert when it is garbage collected or ``restore_original_limits``
    is called.
    """
    from threadpoolctl import threadpool_limits

    if n is None:
        return None
    if HAS_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(limits=n)
