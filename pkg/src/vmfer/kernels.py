"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; otherwise, or when
``VMFER_PURE_PYTHON=1`` is set, the numpy implementation is used. Both expose
``sumtree_set``, ``sumtree_rebuild``, ``sumtree_find`` and ``bundle_factors``.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("VMFER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

sumtree_set = _impl.sumtree_set
sumtree_rebuild = _impl.sumtree_rebuild
sumtree_find = _impl.sumtree_find
bundle_factors = _impl.bundle_factors

DEGENERATE_R = _kernels_py.DEGENERATE_R


def available_backends():
    """Mapping of backend name to kernel module for every importable backend."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        return out
    out["cython"] = compiled
    return out
