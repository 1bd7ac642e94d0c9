# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: stride-1, zero "same" padding, channel-last.

Loop order keeps the innermost accesses contiguous over the channel axis so
the C compiler can vectorize them. Parallel loops never share an output
slot, so results are bitwise identical for any thread count.
"""

import numpy as np

from cython.parallel cimport prange

NAME = "compiled"

ctypedef fused floating:
    float
    double


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] kernels):
    cdef Py_ssize_t b_n = x.shape[0], h = x.shape[1], w = x.shape[2], c_in = x.shape[3]
    cdef Py_ssize_t kh = kernels.shape[0], kw = kernels.shape[1], c_out = kernels.shape[3]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    out_arr = np.zeros((b_n, h, w, c_out), dtype=np.asarray(x).dtype)
    cdef floating[:, :, :, ::1] y = out_arr
    cdef Py_ssize_t b, i, j, di, dj, c, o, ii, jj
    cdef floating xv
    with nogil:
        for b in prange(b_n, schedule='static'):
            for i in range(h):
                for di in range(kh):
                    ii = i + di - ph
                    if ii < 0 or ii >= h:
                        continue
                    for j in range(w):
                        for dj in range(kw):
                            jj = j + dj - pw
                            if jj < 0 or jj >= w:
                                continue
                            for c in range(c_in):
                                xv = x[b, ii, jj, c]
                                for o in range(c_out):
                                    y[b, i, j, o] += xv * kernels[di, dj, c, o]
    return out_arr


def conv2d_backward_input(floating[:, :, :, ::1] grad_out, floating[:, :, :, ::1] kernels):
    cdef Py_ssize_t b_n = grad_out.shape[0], h = grad_out.shape[1], w = grad_out.shape[2]
    cdef Py_ssize_t kh = kernels.shape[0], kw = kernels.shape[1]
    cdef Py_ssize_t c_in = kernels.shape[2], c_out = kernels.shape[3]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    gx_arr = np.zeros((b_n, h, w, c_in), dtype=np.asarray(grad_out).dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, i, j, di, dj, c, o, ii, jj
    cdef floating acc
    with nogil:
        for b in prange(b_n, schedule='static'):
            for i in range(h):
                for di in range(kh):
                    ii = i + di - ph
                    if ii < 0 or ii >= h:
                        continue
                    for j in range(w):
                        for dj in range(kw):
                            jj = j + dj - pw
                            if jj < 0 or jj >= w:
                                continue
                            for c in range(c_in):
                                acc = 0
                                for o in range(c_out):
                                    acc = acc + grad_out[b, i, j, o] * kernels[di, dj, c, o]
                                gx[b, ii, jj, c] += acc
    return gx_arr


def conv2d_backward_kernels(floating[:, :, :, ::1] x, floating[:, :, :, ::1] grad_out,
                            Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t b_n = x.shape[0], h = x.shape[1], w = x.shape[2], c_in = x.shape[3]
    cdef Py_ssize_t c_out = grad_out.shape[3]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    gk_arr = np.zeros((kh, kw, c_in, c_out), dtype=np.asarray(x).dtype)
    cdef floating[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, i, j, di, dj, c, o, ii, jj
    cdef floating xv
    # parallel over input channels: each thread owns gk[:, :, c, :]
    with nogil:
        for c in prange(c_in, schedule='static'):
            for b in range(b_n):
                for i in range(h):
                    for di in range(kh):
                        ii = i + di - ph
                        if ii < 0 or ii >= h:
                            continue
                        for j in range(w):
                            for dj in range(kw):
                                jj = j + dj - pw
                                if jj < 0 or jj >= w:
                                    continue
                                xv = x[b, ii, jj, c]
                                for o in range(c_out):
                                    gk[di, dj, c, o] += xv * grad_out[b, i, j, o]
    return gk_arr
