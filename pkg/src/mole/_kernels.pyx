# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics mirror ``mole._pykernels`` exactly."""
from libc.math cimport sqrt, fabs

import numpy as np
cimport numpy as cnp


def jacobi_sweep(double[:, ::1] at, double[:, ::1] vt, double eps, double abs_tol):
    """One cyclic sweep of one-sided Jacobi rotations over column pairs.

    ``at`` holds the working matrix's columns as rows, ``vt`` the accumulated
    right rotations the same way. Returns the number of rotations applied.
    """
    cdef Py_ssize_t m = at.shape[0], n = at.shape[1], nv = vt.shape[1]
    cdef Py_ssize_t p, q, i
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y
    cdef long rotations = 0
    for p in range(m - 1):
        for q in range(p + 1, m):
            alpha = 0.0
            beta = 0.0
            gamma = 0.0
            for i in range(n):
                x = at[p, i]
                y = at[q, i]
                alpha += x * x
                beta += y * y
                gamma += x * y
            if fabs(gamma) <= abs_tol or fabs(gamma) <= eps * sqrt(alpha * beta):
                continue
            zeta = (beta - alpha) / (2.0 * gamma)
            if zeta >= 0:
                t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
            else:
                t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
            c = 1.0 / sqrt(1.0 + t * t)
            s = c * t
            for i in range(n):
                x = at[p, i]
                y = at[q, i]
                at[p, i] = c * x - s * y
                at[q, i] = s * x + c * y
            for i in range(nv):
                x = vt[p, i]
                y = vt[q, i]
                vt[p, i] = c * x - s * y
                vt[q, i] = s * x + c * y
            rotations += 1
    return rotations


def bpe_merge(list ids, int[:, ::1] rank, int first_merge_id):
    """Greedy lowest-rank pair merging of one pre-tokenized chunk."""
    cdef Py_ssize_t n = len(ids), i, j, best_i
    cdef int best, r, a, b
    cdef cnp.ndarray[cnp.int32_t, ndim=1] buf = np.array(ids, dtype=np.int32)
    cdef int[::1] seq = buf
    while n > 1:
        best = -1
        best_i = -1
        for i in range(n - 1):
            a = seq[i]
            b = seq[i + 1]
            r = rank[a, b]
            if r >= 0 and (best < 0 or r < best):
                best = r
                best_i = i
        if best < 0:
            break
        # merge every occurrence of the winning pair, left to right
        a = seq[best_i]
        b = seq[best_i + 1]
        i = 0
        j = 0
        while i < n:
            if i + 1 < n and seq[i] == a and seq[i + 1] == b:
                seq[j] = first_merge_id + best
                i += 2
            else:
                seq[j] = seq[i]
                i += 1
            j += 1
        n = j
    return [seq[i] for i in range(n)]
