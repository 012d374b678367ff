"""Hot geometry kernels: compiled when the extension built, numpy otherwise.

Set ``OMNISEG_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels as python

compiled = None
if not os.environ.get("OMNISEG_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

BACKEND = "cython" if compiled is not None else "python"
_impl = compiled if compiled is not None else python

knn_hash = _impl.knn_hash
fill_holes = _impl.fill_holes

__all__ = ["BACKEND", "compiled", "python", "knn_hash", "fill_holes"]
