"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when importable; otherwise (or
when the ``MFF_FORCE_PYTHON`` environment variable is non-empty) the numpy /
pure-Python versions in ``_pykernels`` are used. Both expose the same four
functions with identical semantics.
"""

import os

from mff import _pykernels

python_backend = _pykernels

if os.environ.get("MFF_FORCE_PYTHON"):
    compiled_backend = None
else:
    try:
        from mff import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend

BACKEND = "cython" if _impl is compiled_backend else "python"

convex_intersection_area = _impl.convex_intersection_area
bev_overlap_matrix = _impl.bev_overlap_matrix
zbuffer_min = _impl.zbuffer_min
bev_scatter = _impl.bev_scatter
