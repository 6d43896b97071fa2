# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop 2-D convolution kernels (float64, NCHW)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline void _valid_range(Py_ssize_t k, Py_ssize_t size, Py_ssize_t out_size, Py_ssize_t stride,
                              Py_ssize_t padding, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output positions o with 0 <= o*stride + k - padding < size, as [lo, hi)
    cdef Py_ssize_t a = padding - k
    cdef Py_ssize_t top = size - 1 + padding - k
    lo[0] = (a + stride - 1) // stride if a > 0 else 0
    if top < 0:
        hi[0] = 0
    else:
        hi[0] = top // stride + 1
        if hi[0] > out_size:
            hi[0] = out_size
    if hi[0] < lo[0]:
        hi[0] = lo[0]


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] weight,
                   const double[::1] bias, Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = weight.shape[0], KH = weight.shape[2], KW = weight.shape[3]
    cdef Py_ssize_t HO = (H + 2 * padding - KH) // stride + 1
    cdef Py_ssize_t WO = (W + 2 * padding - KW) // stride + 1
    out_arr = np.empty((B, O, HO, WO), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, oh, ow, i, j, ih, off, h_lo, h_hi, w_lo, w_hi
    cdef double wv
    with nogil:
        for b in range(B):
            for o in range(O):
                for oh in range(HO):
                    for ow in range(WO):
                        out[b, o, oh, ow] = bias[o]
                for c in range(C):
                    for i in range(KH):
                        _valid_range(i, H, HO, stride, padding, &h_lo, &h_hi)
                        for j in range(KW):
                            _valid_range(j, W, WO, stride, padding, &w_lo, &w_hi)
                            wv = weight[o, c, i, j]
                            off = j - padding
                            for oh in range(h_lo, h_hi):
                                ih = oh * stride + i - padding
                                for ow in range(w_lo, w_hi):
                                    out[b, o, oh, ow] += wv * x[b, c, ih, ow * stride + off]
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] weight,
                    const double[:, :, :, ::1] grad_out, Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = weight.shape[0], KH = weight.shape[2], KW = weight.shape[3]
    cdef Py_ssize_t HO = grad_out.shape[2], WO = grad_out.shape[3]
    gx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    gw_arr = np.zeros((O, C, KH, KW), dtype=np.float64)
    gb_arr = np.zeros(O, dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t b, o, c, oh, ow, i, j, ih, iw, off, h_lo, h_hi, w_lo, w_hi
    cdef double wv, gv, acc
    with nogil:
        for o in range(O):
            acc = 0.0
            for b in range(B):
                for oh in range(HO):
                    for ow in range(WO):
                        acc = acc + grad_out[b, o, oh, ow]
            gb[o] = acc
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for i in range(KH):
                        _valid_range(i, H, HO, stride, padding, &h_lo, &h_hi)
                        for j in range(KW):
                            _valid_range(j, W, WO, stride, padding, &w_lo, &w_hi)
                            wv = weight[o, c, i, j]
                            off = j - padding
                            acc = 0.0
                            for oh in range(h_lo, h_hi):
                                ih = oh * stride + i - padding
                                for ow in range(w_lo, w_hi):
                                    iw = ow * stride + off
                                    gv = grad_out[b, o, oh, ow]
                                    acc = acc + gv * x[b, c, ih, iw]
                                    gx[b, c, ih, iw] += gv * wv
                            gw[o, c, i, j] += acc
    return gx_arr, gw_arr, gb_arr
