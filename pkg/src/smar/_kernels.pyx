# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selection kernels for exact top-k retrieval and hit counting."""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdlib cimport free, malloc

cnp.import_array()


cdef inline bint _better(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib) noexcept nogil:
    # higher score wins; equal scores go to the lower column index
    return sa > sb or (sa == sb and ia < ib)


cdef void _sift_down(double* s, Py_ssize_t* ix, Py_ssize_t n, Py_ssize_t pos) noexcept nogil:
    # heap root holds the worst kept entry
    cdef Py_ssize_t child, worst
    cdef double ts
    cdef Py_ssize_t ti
    while True:
        child = 2 * pos + 1
        if child >= n:
            return
        worst = child
        if child + 1 < n and _better(s[child], ix[child], s[child + 1], ix[child + 1]):
            worst = child + 1
        if _better(s[pos], ix[pos], s[worst], ix[worst]):
            ts = s[pos]; s[pos] = s[worst]; s[worst] = ts
            ti = ix[pos]; ix[pos] = ix[worst]; ix[worst] = ti
            pos = worst
        else:
            return


cdef void _select_row(const double[:, ::1] scores, Py_ssize_t r, Py_ssize_t k,
                      cnp.int64_t[:, ::1] out_idx, double[:, ::1] out_val) noexcept nogil:
    cdef Py_ssize_t n = scores.shape[1]
    cdef double* s = <double*> malloc(k * sizeof(double))
    cdef Py_ssize_t* ix = <Py_ssize_t*> malloc(k * sizeof(Py_ssize_t))
    cdef Py_ssize_t j, m, size = 0
    cdef double v
    cdef double ts
    cdef Py_ssize_t ti
    for j in range(n):
        v = scores[r, j]
        if size < k:
            s[size] = v
            ix[size] = j
            size += 1
            if size == k:
                m = k // 2
                while m > 0:
                    m -= 1
                    _sift_down(s, ix, k, m)
        elif _better(v, j, s[0], ix[0]):
            s[0] = v
            ix[0] = j
            _sift_down(s, ix, k, 0)
    if size < k:
        m = size // 2
        while m > 0:
            m -= 1
            _sift_down(s, ix, size, m)
    # pop worst-first into the tail of the output row
    m = size
    while m > 0:
        m -= 1
        out_val[r, m] = s[0]
        out_idx[r, m] = ix[0]
        s[0] = s[m]
        ix[0] = ix[m]
        _sift_down(s, ix, m, 0)
    free(s)
    free(ix)


def topk_rows(const double[:, ::1] scores, Py_ssize_t k, int threads=1):
    """Per row, the ``k`` best columns by (score desc, column asc)."""
    cdef Py_ssize_t q = scores.shape[0]
    cdef Py_ssize_t kk = min(k, scores.shape[1])
    out_idx = np.empty((q, kk), dtype=np.int64)
    out_val = np.empty((q, kk), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] oi = out_idx
    cdef double[:, ::1] ov = out_val
    cdef Py_ssize_t r
    if kk == 0:
        return out_idx, out_val
    if threads > 1:
        for r in prange(q, nogil=True, num_threads=threads, schedule="static"):
            _select_row(scores, r, kk, oi, ov)
    else:
        with nogil:
            for r in range(q):
                _select_row(scores, r, kk, oi, ov)
    return out_idx, out_val


def prefix_hits(const cnp.int64_t[:, ::1] ranked, const cnp.int64_t[::1] indptr,
                const cnp.int64_t[::1] indices):
    """Cumulative count of relevant columns in each ranked prefix.

    Row ``r``'s relevant columns are ``indices[indptr[r]:indptr[r+1]]``,
    sorted ascending. Negative entries in ``ranked`` are padding.
    """
    cdef Py_ssize_t q = ranked.shape[0], depth = ranked.shape[1]
    out = np.zeros((q, depth), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef Py_ssize_t r, j, lo, hi, mid
    cdef cnp.int64_t c, target
    with nogil:
        for r in range(q):
            c = 0
            for j in range(depth):
                target = ranked[r, j]
                if target >= 0:
                    lo = indptr[r]
                    hi = indptr[r + 1]
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if indices[mid] < target:
                            lo = mid + 1
                        else:
                            hi = mid
                    if lo < indptr[r + 1] and indices[lo] == target:
                        c += 1
                o[r, j] = c
    return out
