"""Backend selection for the detection kernels.

The compiled ``_kernels`` extension is preferred; set ``DOMGEN_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names whichever one was picked.
"""
import os

from . import _kernels_py

if os.environ.get("DOMGEN_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

iou_matrix = _impl.iou_matrix
nms = _impl.nms
greedy_match = _impl.greedy_match

__all__ = ["BACKEND", "iou_matrix", "nms", "greedy_match"]
