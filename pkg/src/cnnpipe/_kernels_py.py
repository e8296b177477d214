"""Pure-Python segment kernels. Reference semantics for ``_kernels.pyx``."""

import numpy as np


def touched_rows(a, b, k, s, p, h):
    """Span of input rows read by output rows ``[a, b)`` of a window of size
    ``k``, stride ``s`` and padding ``p`` over an input of height ``h``."""
    if b <= a:
        return 0, 0
    lo = (p - k) // s + 1
    r0 = a if a > lo else lo
    hi = (h + p - 1) // s
    r1 = b - 1 if b - 1 < hi else hi
    if r0 > r1:
        return 0, 0
    start = r0 * s - p
    end = r1 * s - p + k
    return (start if start > 0 else 0), (end if end < h else h)


def segment_rows(kh, sh, ph, hin, cons_ptr, cons_idx, sink_start, sink_end):
    """Propagate per-device output strips backwards through a segment.

    Layers are indexed locally in topological order. ``sink_start[d, i] < 0``
    marks layer ``i`` as not being a sink. Returns ``(out_start, out_end,
    in_start, in_end)``, each of shape ``(devices, layers)``; an empty
    interval is ``(0, 0)``.
    """
    m, n = sink_start.shape
    kh = kh.tolist(); sh = sh.tolist(); ph = ph.tolist(); hin = hin.tolist()
    cons_ptr = cons_ptr.tolist(); cons_idx = cons_idx.tolist()
    ss = sink_start.tolist(); se = sink_end.tolist()
    os_ = [[0] * n for _ in range(m)]
    oe = [[0] * n for _ in range(m)]
    is_ = [[0] * n for _ in range(m)]
    ie = [[0] * n for _ in range(m)]
    for d in range(m):
        osd, oed, isd, ied = os_[d], oe[d], is_[d], ie[d]
        ssd, sed = ss[d], se[d]
        for i in range(n - 1, -1, -1):
            lo = hi = 0
            empty = True
            if ssd[i] >= 0 and sed[i] > ssd[i]:
                lo, hi, empty = ssd[i], sed[i], False
            for c in cons_idx[cons_ptr[i]:cons_ptr[i + 1]]:
                a, b = isd[c], ied[c]
                if b > a:
                    if empty:
                        lo, hi, empty = a, b, False
                    else:
                        if a < lo:
                            lo = a
                        if b > hi:
                            hi = b
            if empty:
                continue
            osd[i], oed[i] = lo, hi
            isd[i], ied[i] = touched_rows(lo, hi, kh[i], sh[i], ph[i], hin[i])
    return (
        np.array(os_, dtype=np.int64).reshape(m, n),
        np.array(oe, dtype=np.int64).reshape(m, n),
        np.array(is_, dtype=np.int64).reshape(m, n),
        np.array(ie, dtype=np.int64).reshape(m, n),
    )


def owned_rows(out_start, out_end):
    """Rows each device computes that no earlier device (in list order) also
    computes, per layer. Shape ``(devices, layers)``."""
    m, n = out_start.shape
    st = out_start.tolist(); en = out_end.tolist()
    owned = [[0] * n for _ in range(m)]
    for i in range(n):
        covered = []  # merged, sorted intervals
        for d in range(m):
            a, b = st[d][i], en[d][i]
            if b <= a:
                continue
            overlap = 0
            for x, y in covered:
                lo = a if a > x else x
                hi = b if b < y else y
                if hi > lo:
                    overlap += hi - lo
            owned[d][i] = b - a - overlap
            merged = []
            for x, y in covered:
                if y < a or x > b:
                    merged.append((x, y))
                else:
                    a, b = min(a, x), max(b, y)
            merged.append((a, b))
            merged.sort()
            covered = merged
    return np.array(owned, dtype=np.int64).reshape(m, n)
