"""Kernel backend selection.

The compiled ``_ckernels`` extension (convolution unfolding and the
attention softmax backward) is used when it was built; otherwise the
numpy implementation in ``_pykernels`` is loaded. Setting ``CPGAN_PURE_PYTHON=1``
forces the fallback, which is how the test suite exercises both paths.
"""

import os

from cpgan import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CPGAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from cpgan import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
# numpy's vectorised exp beats a scalar compiled loop, so the forward is shared
softmax_lastaxis = _pykernels.softmax_lastaxis
softmax_lastaxis_grad = _impl.softmax_lastaxis_grad

__all__ = ["BACKEND", "im2col", "col2im", "softmax_lastaxis", "softmax_lastaxis_grad"]
