# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled forest hot loops; mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport isinf

cnp.import_array()

cdef extern from *:
    ctypedef long long i128 "__int128"

MAX_TOTAL_WEIGHT = 2_000_000


cdef inline double _midpoint(double a, double b):
    cdef double m = (a + b) / 2.0
    if isinf(m):
        m = a / 2.0 + b / 2.0
    if m >= b:
        m = a
    return m


def scan_feature(const double[::1] xs, const long long[::1] ys, const long long[::1] ws, counts):
    cdef Py_ssize_t n_rows = xs.shape[0], i, best_i = -1
    cdef long long t0 = counts[0], t1 = counts[1], t2 = counts[2]
    cdef long long n = t0 + t1 + t2
    if n > MAX_TOTAL_WEIGHT:
        raise OverflowError("total weight exceeds the compiled kernel's exact range")
    cdef long long l[3]
    cdef long long nl = 0, nr, r0, r1, r2, num, den, best_num = 0, best_den = 0
    l[0] = 0; l[1] = 0; l[2] = 0
    for i in range(n_rows - 1):
        l[ys[i]] += ws[i]
        nl += ws[i]
        if xs[i + 1] == xs[i]:
            continue
        nr = n - nl
        r0 = t0 - l[0]; r1 = t1 - l[1]; r2 = t2 - l[2]
        num = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]) * nr + (r0 * r0 + r1 * r1 + r2 * r2) * nl
        den = nl * nr
        if best_i < 0 or <i128>num * best_den > <i128>best_num * den:
            best_num = num; best_den = den; best_i = i
    if best_i < 0:
        return None
    return _midpoint(xs[best_i], xs[best_i + 1]), best_num, best_den


cdef inline void _proba(const long long[::1] feature, const double[::1] threshold,
                        const long long[::1] left, const long long[::1] right,
                        const unsigned char[::1] is_leaf, const double[:, ::1] proba,
                        const long long[::1] roots, const double* x, double* out) nogil:
    cdef Py_ssize_t t, node
    out[0] = 0.0; out[1] = 0.0; out[2] = 0.0
    for t in range(roots.shape[0]):
        node = roots[t]
        while not is_leaf[node]:
            if x[feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[0] += proba[node, 0]
        out[1] += proba[node, 1]
        out[2] += proba[node, 2]


cdef class Forest:
    """Flat node arrays of a whole model, held as typed views for repeated queries."""

    cdef const long long[::1] feature
    cdef const double[::1] threshold
    cdef const long long[::1] left
    cdef const long long[::1] right
    cdef const unsigned char[::1] is_leaf
    cdef const double[:, ::1] proba_
    cdef const long long[::1] roots

    def __init__(self, feature, threshold, left, right, is_leaf, proba, roots):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.is_leaf = is_leaf
        self.proba_ = proba
        self.roots = roots

    def proba(self, x):
        cdef double buf[8]
        cdef double out[3]
        cdef Py_ssize_t j
        for j in range(8):
            buf[j] = x[j]
        _proba(self.feature, self.threshold, self.left, self.right, self.is_leaf,
               self.proba_, self.roots, buf, out)
        return [out[0], out[1], out[2]]

    def proba_batch(self, X):
        cdef const double[:, ::1] xv = np.ascontiguousarray(X, dtype=np.float64)
        cdef Py_ssize_t m = xv.shape[0], i
        result = np.empty((m, 3), dtype=np.float64)
        cdef double[:, ::1] rv = result
        if m == 0:
            return result
        with nogil:
            for i in range(m):
                _proba(self.feature, self.threshold, self.left, self.right, self.is_leaf,
                       self.proba_, self.roots, &xv[i, 0], &rv[i, 0])
        return result
