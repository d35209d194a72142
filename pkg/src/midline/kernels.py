"""Hot-loop kernels with a compiled backend and a numpy fallback.

The Cython extension ``midline._kernels`` is used when it was built; otherwise
the pure-numpy module is loaded. Set ``MIDLINE_KERNELS=python`` to force the
fallback (useful for benchmarking and for cross-checking the two).
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MIDLINE_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def get_backend(name=None):
    """Return the kernel module by name (``"cython"``/``"python"``), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, k, stride, pad):
    return _impl.im2col(_c(x), int(k), int(stride), int(pad))


def col2im(cols, n_c, h, w, k, stride, pad):
    return _impl.col2im(_c(cols), int(n_c), int(h), int(w), int(k), int(stride), int(pad))


def bilinear_sample(img, gx, gy, fill=0.0):
    dt = img.dtype
    return _impl.bilinear_sample(_c(img), _c(gx.astype(dt, copy=False)),
                                 _c(gy.astype(dt, copy=False)), float(fill))


def bilinear_sample_backward(grad, img, gx, gy, fill=0.0):
    dt = img.dtype
    return _impl.bilinear_sample_backward(_c(grad.astype(dt, copy=False)), _c(img),
                                          _c(gx.astype(dt, copy=False)),
                                          _c(gy.astype(dt, copy=False)), float(fill))
