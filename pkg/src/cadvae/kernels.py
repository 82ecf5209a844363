"""Hot convolution kernels with an import-time backend choice.

The compiled ``_ckernels`` extension is used when it was built; otherwise
the numpy implementation in ``_kernels_py`` is used. Set
``CADVAE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CADVAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

out_size = _kernels_py.out_size


def im2col(x, kh, kw, stride, pad):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return _impl.col2im(cols, tuple(int(v) for v in x_shape), kh, kw, stride, pad)
