# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled transport kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp


def advect_step(const cnp.int32_t[::1] indptr, const cnp.int32_t[::1] indices, const double[::1] data,
                const double[::1] s, const double[::1] src, double[::1] out):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t i, k
    cdef double acc
    cdef double lo = 0.0, hi = 0.0
    with nogil:
        for i in range(n):
            acc = src[i]
            for k in range(indptr[i], indptr[i + 1]):
                acc = acc + data[k] * s[indices[k]]
            out[i] = acc
            if i == 0:
                lo = acc
                hi = acc
            elif acc < lo:
                lo = acc
            elif acc > hi:
                hi = acc
    return lo, hi


def network_step(const cnp.int64_t[::1] order, const cnp.uint8_t[::1] fixed, const double[::1] fixed_val,
                 const cnp.int64_t[::1] in_ptr, const cnp.int64_t[::1] in_seg, const cnp.int64_t[::1] seg_up,
                 const cnp.int64_t[::1] seg_k, const double[::1] seg_theta, const double[::1] seg_weight,
                 double[:, ::1] hist, Py_ssize_t pos):
    cdef Py_ssize_t L = hist.shape[1]
    cdef Py_ssize_t prev = (pos - 1 + L) % L
    cdef Py_ssize_t m, j, a, b, q, e, u, i0, i1
    cdef double acc, th
    with nogil:
        for m in range(order.shape[0]):
            j = order[m]
            if fixed[j]:
                hist[j, pos] = fixed_val[j]
                continue
            a = in_ptr[j]
            b = in_ptr[j + 1]
            if a == b:
                hist[j, pos] = hist[j, prev]
                continue
            acc = 0.0
            for q in range(a, b):
                e = in_seg[q]
                u = seg_up[e]
                th = seg_theta[e]
                i0 = ((pos - seg_k[e]) % L + L) % L
                i1 = ((pos - seg_k[e] - 1) % L + L) % L
                acc = acc + seg_weight[e] * ((1.0 - th) * hist[u, i0] + th * hist[u, i1])
            hist[j, pos] = acc
