# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment/scatter kernels for the edge-list message passing.

Callers validate index ranges; these loops do not. Accumulation order is
the input order, matching the numpy fallback bit for bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def scatter_add_rows(double[:, ::1] out, cnp.int64_t[::1] idx, double[:, ::1] rows):
    cdef Py_ssize_t e, j, k
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t d = rows.shape[1]
    for e in range(n):
        k = idx[e]
        for j in range(d):
            out[k, j] += rows[e, j]
    return np.asarray(out)


def scatter_add_vec(double[::1] out, cnp.int64_t[::1] idx, double[::1] vals):
    cdef Py_ssize_t e
    cdef Py_ssize_t n = idx.shape[0]
    for e in range(n):
        out[idx[e]] += vals[e]
    return np.asarray(out)


def segment_sum(double[::1] x, cnp.int64_t[::1] seg, Py_ssize_t out_rows):
    out_arr = np.zeros(out_rows, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t e
    cdef Py_ssize_t n = seg.shape[0]
    for e in range(n):
        out[seg[e]] += x[e]
    return out_arr


def segment_max(double[::1] x, cnp.int64_t[::1] seg, Py_ssize_t out_rows):
    out_arr = np.full(out_rows, -np.inf, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t e
    cdef Py_ssize_t n = seg.shape[0]
    for e in range(n):
        if x[e] > out[seg[e]]:
            out[seg[e]] = x[e]
    return out_arr


def segment_weighted_sum(double[:, ::1] values, double[::1] weights,
                         cnp.int64_t[::1] seg, Py_ssize_t out_rows):
    out_arr = np.zeros((out_rows, values.shape[1]), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t e, j, k
    cdef Py_ssize_t n = seg.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef double w
    for e in range(n):
        k = seg[e]
        w = weights[e]
        for j in range(d):
            out[k, j] += w * values[e, j]
    return out_arr


def segment_weighted_sum_backward(double[:, ::1] gout, double[:, ::1] values,
                                  double[::1] weights, cnp.int64_t[::1] seg):
    cdef Py_ssize_t n = seg.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    gvalues_arr = np.empty((n, d), dtype=np.float64)
    gweights_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] gvalues = gvalues_arr
    cdef double[::1] gweights = gweights_arr
    cdef Py_ssize_t e, j, k
    cdef double w, acc
    for e in range(n):
        k = seg[e]
        w = weights[e]
        acc = 0.0
        for j in range(d):
            gvalues[e, j] = gout[k, j] * w
            acc += gout[k, j] * values[e, j]
        gweights[e] = acc
    return gvalues_arr, gweights_arr
