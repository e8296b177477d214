# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment kernels. Semantics mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline i64 floordiv(i64 a, i64 b) noexcept nogil:
    # C division truncates; round toward negative infinity like Python
    cdef i64 q = a / b
    if (a % b != 0) and ((a < 0) != (b < 0)):
        q -= 1
    return q


cdef inline void _touched(i64 a, i64 b, i64 k, i64 s, i64 p, i64 h, i64* out_lo, i64* out_hi) noexcept nogil:
    cdef i64 lo, r0, hi, r1, start, end
    if b <= a:
        out_lo[0] = 0
        out_hi[0] = 0
        return
    lo = floordiv(p - k, s) + 1
    r0 = a if a > lo else lo
    hi = floordiv(h + p - 1, s)
    r1 = b - 1 if b - 1 < hi else hi
    if r0 > r1:
        out_lo[0] = 0
        out_hi[0] = 0
        return
    start = r0 * s - p
    end = r1 * s - p + k
    out_lo[0] = start if start > 0 else 0
    out_hi[0] = end if end < h else h


def touched_rows(i64 a, i64 b, i64 k, i64 s, i64 p, i64 h):
    cdef i64 lo, hi
    _touched(a, b, k, s, p, h, &lo, &hi)
    return lo, hi


def segment_rows(i64[::1] kh, i64[::1] sh, i64[::1] ph, i64[::1] hin,
                 i64[::1] cons_ptr, i64[::1] cons_idx,
                 i64[:, ::1] sink_start, i64[:, ::1] sink_end):
    cdef Py_ssize_t m = sink_start.shape[0]
    cdef Py_ssize_t n = sink_start.shape[1]
    out_start_a = np.zeros((m, n), dtype=np.int64)
    out_end_a = np.zeros((m, n), dtype=np.int64)
    in_start_a = np.zeros((m, n), dtype=np.int64)
    in_end_a = np.zeros((m, n), dtype=np.int64)
    cdef i64[:, ::1] os_ = out_start_a
    cdef i64[:, ::1] oe = out_end_a
    cdef i64[:, ::1] is_ = in_start_a
    cdef i64[:, ::1] ie = in_end_a
    cdef Py_ssize_t d, i, j
    cdef i64 lo, hi, a, b, c
    cdef bint empty
    with nogil:
        for d in range(m):
            for i in range(n - 1, -1, -1):
                lo = 0
                hi = 0
                empty = True
                if sink_start[d, i] >= 0 and sink_end[d, i] > sink_start[d, i]:
                    lo = sink_start[d, i]
                    hi = sink_end[d, i]
                    empty = False
                for j in range(cons_ptr[i], cons_ptr[i + 1]):
                    c = cons_idx[j]
                    a = is_[d, c]
                    b = ie[d, c]
                    if b > a:
                        if empty:
                            lo = a
                            hi = b
                            empty = False
                        else:
                            if a < lo:
                                lo = a
                            if b > hi:
                                hi = b
                if empty:
                    continue
                os_[d, i] = lo
                oe[d, i] = hi
                _touched(lo, hi, kh[i], sh[i], ph[i], hin[i], &is_[d, i], &ie[d, i])
    return out_start_a, out_end_a, in_start_a, in_end_a


def owned_rows(i64[:, ::1] out_start, i64[:, ::1] out_end):
    cdef Py_ssize_t m = out_start.shape[0]
    cdef Py_ssize_t n = out_start.shape[1]
    owned_a = np.zeros((m, n), dtype=np.int64)
    cdef i64[:, ::1] owned = owned_a
    cdef i64 top = 0
    cdef Py_ssize_t d, i
    cdef i64 r, cnt
    for d in range(m):
        for i in range(n):
            if out_end[d, i] > top:
                top = out_end[d, i]
    mark_a = np.zeros(top + 1, dtype=np.int64)
    cdef i64[::1] mark = mark_a
    with nogil:
        for i in range(n):
            # stamp i + 1 marks rows covered at layer i
            for d in range(m):
                cnt = 0
                for r in range(out_start[d, i], out_end[d, i]):
                    if mark[r] != i + 1:
                        mark[r] = i + 1
                        cnt += 1
                owned[d, i] = cnt
    return owned_a
