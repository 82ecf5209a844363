# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for float64 NCHW tensors."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, p, q, ch, i, j, row, col, yy, xx
    with nogil:
        for b in range(n):
            for p in range(oh):
                for q in range(ow):
                    row = (b * oh + p) * ow + q
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            yy = p * stride + i - pad
                            for j in range(kw):
                                xx = q * stride + j - pad
                                if 0 <= yy < h and 0 <= xx < w:
                                    out[row, col] = x[b, ch, yy, xx]
                                col += 1
    return out_arr


def col2im(const double[:, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, p, q, ch, i, j, row, col, yy, xx
    with nogil:
        for b in range(n):
            for p in range(oh):
                for q in range(ow):
                    row = (b * oh + p) * ow + q
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            yy = p * stride + i - pad
                            for j in range(kw):
                                xx = q * stride + j - pad
                                if 0 <= yy < h and 0 <= xx < w:
                                    out[b, ch, yy, xx] += cols[row, col]
                                col += 1
    return out_arr
