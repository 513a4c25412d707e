# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled projection kernels.

Every kernel works on a row-major volume viewed as (a*b, c) and a bilinear
rotation stencil: row r = i*b + j of ``idx``/``w`` lists the four source rows
and weights that produce rotated sample (i, j). Accumulating kernels add into
``out`` so several angles can share one buffer.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def project_max(const floating[:, ::1] vol, const cnp.intp_t[:, ::1] idx, const floating[:, ::1] w,
                Py_ssize_t a, Py_ssize_t b):
    cdef Py_ssize_t c = vol.shape[1]
    dtype = np.float32 if floating is float else np.float64
    img_arr = np.full((b, c), -np.inf, dtype=dtype)
    arg_arr = np.zeros((b, c), dtype=np.int32)
    cdef floating[:, ::1] img = img_arr
    cdef int[:, ::1] arg = arg_arr
    cdef Py_ssize_t i, j, k, n, r
    cdef floating v
    with nogil:
        for i in range(a):
            for j in range(b):
                r = i * b + j
                for k in range(c):
                    v = 0
                    for n in range(4):
                        v = v + w[r, n] * vol[idx[r, n], k]
                    if v > img[j, k]:
                        img[j, k] = v
                        arg[j, k] = <int>i
    return img_arr, arg_arr


def project_sum(const floating[:, ::1] vol, const cnp.intp_t[:, ::1] idx, const floating[:, ::1] w,
                Py_ssize_t a, Py_ssize_t b):
    cdef Py_ssize_t c = vol.shape[1]
    dtype = np.float32 if floating is float else np.float64
    img_arr = np.zeros((b, c), dtype=dtype)
    cdef floating[:, ::1] img = img_arr
    cdef Py_ssize_t i, j, k, n, r, src
    cdef floating wn
    with nogil:
        for i in range(a):
            for j in range(b):
                r = i * b + j
                for n in range(4):
                    wn = w[r, n]
                    if wn == 0:
                        continue
                    src = idx[r, n]
                    for k in range(c):
                        img[j, k] += wn * vol[src, k]
    return img_arr


def smear_adjoint(const floating[:, ::1] img, const cnp.intp_t[:, ::1] idx, const floating[:, ::1] w,
                  Py_ssize_t a, Py_ssize_t b, floating[:, ::1] out):
    cdef Py_ssize_t c = img.shape[1]
    cdef Py_ssize_t i, j, k, n, r, dst
    cdef floating wn
    with nogil:
        for i in range(a):
            for j in range(b):
                r = i * b + j
                for n in range(4):
                    wn = w[r, n]
                    if wn == 0:
                        continue
                    dst = idx[r, n]
                    for k in range(c):
                        out[dst, k] += wn * img[j, k]


def max_adjoint(const floating[:, ::1] g, const int[:, ::1] arg, const cnp.intp_t[:, ::1] idx,
                const floating[:, ::1] w, Py_ssize_t b, floating[:, ::1] out):
    cdef Py_ssize_t c = g.shape[1]
    cdef Py_ssize_t j, k, n, r
    with nogil:
        for j in range(b):
            for k in range(c):
                r = arg[j, k] * b + j
                for n in range(4):
                    out[idx[r, n], k] += w[r, n] * g[j, k]
