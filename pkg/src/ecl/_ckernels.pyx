# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled binning and proximal kernels.

Each function mirrors one in ``ecl._pykernels`` and must return bit-identical
results; ``tests/test_kernels.py`` enforces that.
"""
import numpy as np

from libc.math cimport floor, sqrt


def uniform_bin_index(const double[::1] x, Py_ssize_t n_bins):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, j
    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] o = out
    for i in range(n):
        j = <Py_ssize_t>floor(x[i] * n_bins)
        if j >= n_bins:
            j = n_bins - 1
        elif j < 0:
            j = 0
        o[i] = j
    return out


def nearest_anchor(const double[:, ::1] points, const double[:, ::1] anchors):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t k = points.shape[1]
    cdef Py_ssize_t b = anchors.shape[0]
    cdef Py_ssize_t i, j, c, best
    cdef double d, diff, best_d
    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] o = out
    for i in range(n):
        best = 0
        best_d = 0.0
        for j in range(b):
            d = 0.0
            for c in range(k):
                diff = points[i, c] - anchors[j, c]
                d = d + diff * diff
            if j == 0 or d < best_d:
                best_d = d
                best = j
        o[i] = best
    return out


def binned_sums(const Py_ssize_t[::1] idx, const double[:, ::1] values, Py_ssize_t n_bins):
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t k = values.shape[1]
    cdef Py_ssize_t i, c, j
    counts = np.zeros(n_bins, dtype=np.float64)
    sums = np.zeros((n_bins, k), dtype=np.float64)
    cdef double[::1] cnt = counts
    cdef double[:, ::1] s = sums
    for i in range(n):
        j = idx[i]
        if j < 0 or j >= n_bins:
            raise IndexError(f"bin index {j} out of range")
        cnt[j] += 1.0
        for c in range(k):
            s[j, c] += values[i, c]
    return counts, sums


cdef inline void _shrink_step(double[:, ::1] target, double[:, ::1] base,
                              const double[:, ::1] m, const double[::1] n,
                              double w, Py_ssize_t j, Py_ssize_t k, double* v) nogil:
    # target_j <- base_j + shrink(m_j / n_j - base_j, w / (2 n_j))
    cdef Py_ssize_t c
    cdef double nrm = 0.0
    cdef double tau = w / (2.0 * n[j])
    cdef double scale
    for c in range(k):
        v[c] = m[j, c] / n[j] - base[j, c]
        nrm = nrm + v[c] * v[c]
    nrm = sqrt(nrm)
    if nrm <= tau:
        scale = 0.0
    else:
        scale = 1.0 - tau / nrm
    for c in range(k):
        target[j, c] = base[j, c] + scale * v[c]


def prox_updates(double[:, ::1] u_s, double[:, ::1] u_t,
                 const double[:, ::1] m_s, const double[::1] n_s,
                 const double[:, ::1] m_t, const double[::1] n_t,
                 const double[::1] w, Py_ssize_t n_iter):
    """In-place alternating proximal updates over every bin with positive counts."""
    cdef Py_ssize_t b = u_s.shape[0]
    cdef Py_ssize_t k = u_s.shape[1]
    cdef Py_ssize_t j, it
    cdef double[::1] scratch = np.empty(max(k, 1), dtype=np.float64)
    for j in range(b):
        if n_s[j] <= 0.0 or n_t[j] <= 0.0:
            continue
        for it in range(n_iter):
            _shrink_step(u_s, u_t, m_s, n_s, w[j], j, k, &scratch[0])
            _shrink_step(u_t, u_s, m_t, n_t, w[j], j, k, &scratch[0])
