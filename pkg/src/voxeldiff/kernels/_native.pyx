# cython: language_level=3
"""Compiled gather/scatter kernels; see kernels/__init__.py for contracts.

The value table arrives channel-major (C, M); both kernels work on a
point-major (M, C) copy so the inner channel loop is contiguous.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def gather(double[:, ::1] values, cnp.int64_t[:, ::1] idx, double[:, ::1] weights):
    cdef Py_ssize_t P = idx.shape[0]
    cdef Py_ssize_t K = idx.shape[1]
    cdef Py_ssize_t C = values.shape[0]
    cdef Py_ssize_t p, j, c
    cdef cnp.int64_t m
    cdef double w
    vt_arr = np.ascontiguousarray(np.asarray(values).T)
    cdef double[:, ::1] vt = vt_arr
    out_arr = np.zeros((P, C))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for p in range(P):
            for j in range(K):
                w = weights[p, j]
                if w == 0.0:
                    continue
                m = idx[p, j]
                for c in range(C):
                    out[p, c] += w * vt[m, c]
    return out_arr


def scatter(double[:, ::1] grad_out, cnp.int64_t[:, ::1] idx,
            double[:, ::1] weights, Py_ssize_t table_size):
    cdef Py_ssize_t P = idx.shape[0]
    cdef Py_ssize_t K = idx.shape[1]
    cdef Py_ssize_t C = grad_out.shape[1]
    cdef Py_ssize_t p, j, c
    cdef cnp.int64_t m
    cdef double w
    acc_arr = np.zeros((table_size, C))
    cdef double[:, ::1] acc = acc_arr
    with nogil:
        for p in range(P):
            for j in range(K):
                w = weights[p, j]
                if w == 0.0:
                    continue
                m = idx[p, j]
                for c in range(C):
                    acc[m, c] += w * grad_out[p, c]
    return np.ascontiguousarray(acc_arr.T)


def gather_dot(double[:, ::1] values, cnp.int64_t[:, ::1] idx,
               double[:, ::1] grad_out):
    cdef Py_ssize_t P = idx.shape[0]
    cdef Py_ssize_t K = idx.shape[1]
    cdef Py_ssize_t C = values.shape[0]
    cdef Py_ssize_t p, j, c
    cdef cnp.int64_t m
    cdef double s
    vt_arr = np.ascontiguousarray(np.asarray(values).T)
    cdef double[:, ::1] vt = vt_arr
    out_arr = np.empty((P, K))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for p in range(P):
            for j in range(K):
                m = idx[p, j]
                s = 0.0
                for c in range(C):
                    s += grad_out[p, c] * vt[m, c]
                out[p, j] = s
    return out_arr
