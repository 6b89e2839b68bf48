"""Hot-loop kernels, compiled when available.

The Cython extension ``_ckernels`` is preferred; if it is not built (or
``CHUNKSIM_PURE_PYTHON=1`` is set) the numpy fallback is used.  Both expose
the same two functions with the same conventions.
"""
import os

import numpy as np

BACKEND = "python"
if os.environ.get("CHUNKSIM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = None
else:
    _impl = None

from . import _pykernels

if _impl is None:
    _impl = _pykernels


def ctc_forward_backward(logp, ext, backend=None):
    """Return log-space ``(alpha, beta)`` for the blank-extended label ``ext``."""
    impl = _pick(backend)
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    ext = np.ascontiguousarray(ext, dtype=np.int64)
    return impl.ctc_forward_backward(logp, ext)


def edit_distance(a, b, backend=None):
    impl = _pick(backend)
    if impl is _pykernels:
        return impl.edit_distance(list(a), list(b))
    return impl.edit_distance(np.ascontiguousarray(a, dtype=np.int64), np.ascontiguousarray(b, dtype=np.int64))


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {backend!r}")
