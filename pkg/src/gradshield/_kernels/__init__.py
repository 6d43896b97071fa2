"""Hot convolution kernels.

The compiled extension (``_conv_ext``) is used when it has been built;
otherwise the numpy implementation in ``_conv_py`` is used. Set
``GRADSHIELD_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _conv_py

try:
    from . import _conv_ext
except ImportError:  # extension not built
    _conv_ext = None

if _conv_ext is not None and os.environ.get("GRADSHIELD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    _impl = _conv_ext
    BACKEND = "cython"
else:
    _impl = _conv_py
    BACKEND = "python"


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    x = np.ascontiguousarray(x, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    return _impl.conv2d_forward(x, weight, bias, int(stride), int(padding))


def conv2d_backward(x, weight, grad_out, stride=1, padding=0):
    x = np.ascontiguousarray(x, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    return _impl.conv2d_backward(x, weight, grad_out, int(stride), int(padding))


def available_backends():
    backends = {"python": _conv_py}
    if _conv_ext is not None:
        backends["cython"] = _conv_ext
    return backends
