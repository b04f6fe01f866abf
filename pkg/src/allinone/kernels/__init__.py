"""Hot numeric kernels.

Every kernel exists twice: a numba-compiled loop version and a vectorized
numpy version with the same signature. The numba path is used when numba
imports and ``ALLINONE_DISABLE_NUMBA`` is unset; both modules stay importable
for cross-checking and benchmarking.
"""
from .. import _backend
from . import _numpy as numpy_impl

if _backend.numba_available():
    from . import _numba as numba_impl
else:  # pragma: no cover
    numba_impl = None

impl = numba_impl if _backend.use_numba() else numpy_impl
BACKEND = "numba" if impl is numba_impl else "numpy"

im2col = impl.im2col
col2im = impl.col2im
conv2d_direct = impl.conv2d_direct
maxpool_forward = impl.maxpool_forward
maxpool_backward = impl.maxpool_backward
pattern_conv = impl.pattern_conv
block_matmul = impl.block_matmul
bn_train_forward = impl.bn_train_forward
bn_train_backward = impl.bn_train_backward

__all__ = [
    "BACKEND", "numpy_impl", "numba_impl", "im2col", "col2im", "conv2d_direct",
    "maxpool_forward", "maxpool_backward", "pattern_conv", "block_matmul",
    "bn_train_forward", "bn_train_backward",
]
