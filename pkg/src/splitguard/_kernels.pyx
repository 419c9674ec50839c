# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im for float32 and float64 tensors."""
import numpy as np
cimport cython
from libc.string cimport memcpy

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] x, real[:, :, ::1] out,
            int kh, int kw, int sh, int sw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - kh) // sh + 1
    cdef Py_ssize_t wo = (w - kw) // sw + 1
    cdef Py_ssize_t b, ch, i, j, oy, ox, row
    cdef real *src
    cdef real *dst
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        dst = &out[b, row, 0]
                        for oy in range(ho):
                            src = &x[b, ch, oy * sh + i, j]
                            if sw == 1:
                                memcpy(dst, src, wo * sizeof(real))
                            else:
                                for ox in range(wo):
                                    dst[ox] = src[ox * sw]
                            dst += wo


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] out,
            int kh, int kw, int sh, int sw):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ho = (out.shape[2] - kh) // sh + 1
    cdef Py_ssize_t wo = (out.shape[3] - kw) // sw + 1
    cdef Py_ssize_t b, ch, i, j, oy, ox, row
    cdef real *src
    cdef real *dst
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        src = &cols[b, row, 0]
                        for oy in range(ho):
                            dst = &out[b, ch, oy * sh + i, j]
                            for ox in range(wo):
                                dst[ox * sw] += src[ox]
                            src += wo


def im2col(x, int kh, int kw, int sh, int sw):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
    _im2col(x, out, kh, kw, sh, sw)
    return out


def col2im(cols, int c, int h, int w, int kh, int kw, int sh, int sw):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, sh, sw)
    return out
