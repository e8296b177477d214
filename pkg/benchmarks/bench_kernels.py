"""Compare the compiled and pure-Python row kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from cnnpipe import kernels, load_fixture
from cnnpipe import _kernels_py
from cnnpipe.cost import equal_strips, segment_table

try:
    from cnnpipe import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _inputs(tab, m):
    bounds = equal_strips(tab.ref_height, m)
    ss = np.full((m, tab.n), -1, np.int64)
    se = np.full((m, tab.n), -1, np.int64)
    for li, hs in zip(tab.sinks, tab.sink_heights):
        for d in range(m):
            ss[d, li] = bounds[d] * hs // tab.ref_height
            se[d, li] = bounds[d + 1] * hs // tab.ref_height
    return (tab.kh, tab.sh, tab.ph, tab.hin, tab.cons_ptr, tab.cons_idx, ss, se)


def bench(mod, args, repeat):
    t_rows = min(timeit.repeat(lambda: mod.segment_rows(*args), number=repeat, repeat=3)) / repeat
    os_, oe, _, _ = mod.segment_rows(*args)
    t_own = min(timeit.repeat(lambda: mod.owned_rows(os_, oe), number=repeat, repeat=3)) / repeat
    return t_rows, t_own


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    a = ap.parse_args()
    print(f"default backend: {kernels.BACKEND}")
    if _kernels_c is None:
        print("compiled extension not built; only the Python backend is available")
    print(f"{'case':<24} {'kernel':<13} {'python_us':>10} {'cython_us':>10} {'speedup':>8}")
    for name, m in (("vgg16", 2), ("vgg16", 8), ("yolov2", 8), ("inception_c", 4), ("nas_like", 8)):
        g = load_fixture(name)
        tab = segment_table(g, g.all_mask)
        args = _inputs(tab, m)
        py = bench(_kernels_py, args, a.repeat)
        cy = bench(_kernels_c, args, a.repeat) if _kernels_c else (float("nan"),) * 2
        for label, p, c in (("segment_rows", py[0], cy[0]), ("owned_rows", py[1], cy[1])):
            print(f"{name + ' x' + str(m):<24} {label:<13} {p * 1e6:>10.1f} {c * 1e6:>10.1f} {p / c:>8.1f}")


if __name__ == "__main__":
    main()
