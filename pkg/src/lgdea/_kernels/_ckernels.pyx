# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see _pykernels for the contracts."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(double[:, ::1] out, const long long[::1] index,
                     const double[:, ::1] rows):
    cdef Py_ssize_t i, j, r
    cdef Py_ssize_t n = rows.shape[0], d = rows.shape[1]
    for i in range(n):
        r = index[i]
        for j in range(d):
            out[r, j] += rows[i, j]
    return np.asarray(out)


cdef inline bint _better(double a, Py_ssize_t ia, double b, Py_ssize_t ib) nogil:
    # a ranks before b: larger value first, then lower index
    return a > b or (a == b and ia < ib)


cdef void _select(const double[:] row, Py_ssize_t skip, Py_ssize_t k,
                  long long[:] idx, double[:] val) nogil:
    # insertion into a sorted buffer of length k; O(m k), fine for small k
    cdef Py_ssize_t j, p, filled = 0
    cdef double x
    for j in range(row.shape[0]):
        if j == skip:
            continue
        x = row[j]
        if filled == k and not _better(x, j, val[k - 1], idx[k - 1]):
            continue
        p = filled if filled < k else k - 1
        while p > 0 and _better(x, j, val[p - 1], idx[p - 1]):
            val[p] = val[p - 1]
            idx[p] = idx[p - 1]
            p -= 1
        val[p] = x
        idx[p] = j
        if filled < k:
            filled += 1


def knn_topk(const double[:, ::1] sim, Py_ssize_t k):
    cdef Py_ssize_t n = sim.shape[0], i
    out = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] o = out
    cdef double[::1] buf = np.empty(k, dtype=np.float64)
    for i in range(n):
        _select(sim[i], i, k, o[i], buf)
    return out


def precision_hits(const double[:, ::1] sim, const long long[::1] image_masks,
                   const long long[::1] report_masks, Py_ssize_t k):
    cdef Py_ssize_t n = sim.shape[0], i, t
    cdef long long count
    hits = np.zeros(n, dtype=np.int64)
    cdef long long[::1] h = hits
    cdef long long[::1] idx = np.empty(k, dtype=np.int64)
    cdef double[::1] buf = np.empty(k, dtype=np.float64)
    for i in range(n):
        _select(sim[i], -1, k, idx, buf)
        count = 0
        for t in range(k):
            if report_masks[idx[t]] & image_masks[i]:
                count += 1
        h[i] = count
    return hits
