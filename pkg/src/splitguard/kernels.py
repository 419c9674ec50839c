"""Backend selection for the convolution unfolding kernels.

The compiled extension is used when it imports; set ``SPLITGUARD_PURE=1`` to
force the numpy implementation. Both produce identical values.
"""
import os

from . import _kernels_py

if os.environ.get("SPLITGUARD_PURE", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
