"""Hot numerical kernels with a compiled fast path.

The Cython extension ``_ckernels`` is used when it was built and importable;
otherwise the numpy implementation in ``_pykernels`` is used.  Setting
``FEDFREEZE_PURE_PYTHON=1`` forces the fallback.  ``BACKEND`` names the
active implementation.
"""
import os

from . import _pykernels

if os.environ.get("FEDFREEZE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
adam_update = _impl.adam_update


def load_compiled():
    """Return the compiled module or None if it is unavailable."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


__all__ = ["BACKEND", "im2col", "col2im", "maxpool_forward", "maxpool_backward",
           "adam_update", "load_compiled"]
