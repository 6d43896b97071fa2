"""Reference numpy implementation of the 2-D convolution kernels.

Layouts: input ``[B, C, H, W]``, weight ``[O, C, kH, kW]``, output
``[B, O, Ho, Wo]``. Cross-correlation (no kernel flip), zero padding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, weight, bias, stride, padding):
    kh, kw = weight.shape[2:]
    xp = _pad(x, padding)
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [B, C, Ho, Wo, kH, kW]
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3]))  # [B, Ho, Wo, O]
    out = out.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out + bias[None, :, None, None])


def conv2d_backward(x, weight, grad_out, stride, padding):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    kh, kw = weight.shape[2:]
    xp = _pad(x, padding)
    ho, wo = grad_out.shape[2:]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, kH, kW]
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_xp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad_out, weight[:, :, i, j], axes=([1], [0]))  # [B, Ho, Wo, C]
            grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    if padding:
        grad_xp = grad_xp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(grad_xp), grad_w, grad_b
