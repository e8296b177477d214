"""Exhaustive reference planners for small instances."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Iterator

from .cost import Cluster, DeviceSpec, compute_time, equal_strips, evaluate_segment, stage_cost
from .cost import comm_time, segment_table, stage_cost_bounds, strips_from_bounds
from .graph import VertexSet
from .partition import PartitionResult
from .planner import INF, PipelinePlan, PlanError, StageConfig, make_plan

MAX_HOMO = (10, 8)
MAX_HETER = (8, 6)
MAX_HEIGHT = 64


class InstanceTooLarge(PlanError):
    pass


@dataclass(frozen=True)
class OracleReport:
    best_plan: PipelinePlan | None
    explored_states: int
    wall_time_s: float
    gap_vs: float | None = None
    # lowest-latency plan, filled in when nothing meets t_lim
    fallback: PipelinePlan | None = None

    @property
    def feasible(self) -> bool:
        return self.best_plan is not None

    def compare(self, other: PipelinePlan) -> "OracleReport":
        gap = None
        if self.best_plan is not None:
            gap = period_ratio(other.predicted_period_s, self.best_plan.predicted_period_s)
        return OracleReport(self.best_plan, self.explored_states, self.wall_time_s, gap, self.fallback)


def period_ratio(period: float, best: float) -> float:
    if best > 0:
        return period / best
    return 1.0 if period == 0 else INF


def compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """Ordered tuples of ``parts`` positive integers summing to ``total``."""
    for cuts in itertools.combinations(range(1, total), parts - 1):
        yield tuple(b - a for a, b in zip((0,) + cuts, cuts + (total,)))


def _splits(L: int, S: int) -> Iterator[tuple[tuple[int, int], ...]]:
    for sizes in compositions(L, S):
        rngs, i = [], 0
        for n in sizes:
            rngs.append((i, i + n - 1))
            i += n
        yield tuple(rngs)


def homogeneous_state_count(L: int, D: int) -> int:
    return sum(math.comb(L - 1, S - 1) * math.comb(D, S) for S in range(1, min(L, D) + 1))


def _pick(cands):
    """Lowest (period, latency, stage count, ranges) candidate, or None."""
    best = min(cands, key=lambda e: (e[0], e[1], e[2], e[3]), default=None)
    return best


def oracle_homogeneous(pieces: PartitionResult, c: Cluster, t_lim: float = INF) -> OracleReport:
    L, D = len(pieces.pieces), len(c.devices)
    if L > MAX_HOMO[0] or D > MAX_HOMO[1]:
        raise InstanceTooLarge(f"instance too large: L={L}, D={D} (limit {MAX_HOMO})")
    if L < 1:
        raise PlanError("empty piece chain")
    if not c.is_uniform:
        raise PlanError("oracle_homogeneous needs a uniform cluster")
    t0 = time.perf_counter()
    g = pieces.graph
    devs = list(c.devices)
    ts: dict[tuple[int, int, int], float] = {}

    def cost(i, j, m):
        key = (i, j, m)
        if key not in ts:
            seg = pieces.segment(i, j)
            H = segment_table(g, seg).ref_height
            if H < m:
                ts[key] = INF
            else:
                strips = strips_from_bounds(equal_strips(H, m))
                ts[key] = stage_cost(seg, devs[:m], strips, g, c.bandwidth_bytes_per_s,
                                     c.bytes_per_element).stage_total_s
        return ts[key]

    explored = 0
    feas, allc = [], []
    for S in range(1, min(L, D) + 1):
        for rngs in _splits(L, S):
            for used in range(S, D + 1):
                for ms in compositions(used, S):
                    explored += 1
                    times = [cost(i, j, m) for (i, j), m in zip(rngs, ms)]
                    if INF in times:
                        continue
                    period, latency = 0.0, 0.0
                    for t in times:
                        period = max(period, t)
                        latency += t
                    key = tuple((i, j, m) for (i, j), m in zip(rngs, ms))
                    e = (period, latency, S, key)
                    allc.append(e)
                    if latency <= t_lim:
                        feas.append(e)

    def build(key):
        names = iter(devs)
        stages = []
        for i, j, m in key:
            seg = pieces.segment(i, j)
            tab = segment_table(g, seg)
            ds = [next(names) for _ in range(m)]
            b = equal_strips(tab.ref_height, m)
            cb = stage_cost_bounds(tab, ds, b, c.bandwidth_bytes_per_s, c.bytes_per_element)
            stages.append(StageConfig((i, j), tuple(d.name for d in ds), tuple(strips_from_bounds(b)), cb, seg))
        return make_plan(stages, t_lim, g)

    best = _pick(feas)
    fallback = None
    if best is None and allc:
        low = min(allc, key=lambda e: (e[1], e[0], e[2], e[3]))
        fallback = build(low[3])
    plan = build(best[3]) if best is not None else None
    return OracleReport(plan, explored, time.perf_counter() - t0, None, fallback)


# -- heterogeneous -------------------------------------------------------------


def _spread(n: int, bins: int) -> Iterator[tuple[int, ...]]:
    """All ways to put ``n`` identical items into ``bins`` ordered bins."""
    if bins == 1:
        yield (n,)
        return
    for k in range(n + 1):
        for rest in _spread(n - k, bins - 1):
            yield (k,) + rest


class _StageSearch:
    """Best strips for a stage and device multiset by exhaustive split points."""

    def __init__(self, pieces: PartitionResult, c: Cluster):
        self.pieces = pieces
        self.c = c
        self.g = pieces.graph
        self._iv: dict[tuple[int, int], dict] = {}
        self._best: dict = {}

    def _intervals(self, i: int, j: int):
        key = (i, j)
        if key not in self._iv:
            tab = segment_table(self.g, self.pieces.segment(i, j))
            H = tab.ref_height
            table = {}
            for a in range(H):
                for b in range(a + 1, H + 1):
                    ev = evaluate_segment(tab, [a, b])
                    table[(a, b)] = (int(ev.flops[0]), int(ev.in_elems[0]), int(ev.out_elems[0]))
            self._iv[key] = (tab, table)
        return self._iv[key]

    def best(self, i: int, j: int, kinds: tuple[tuple[float, float], ...]):
        """(stage time, bounds) for devices of the given (capacity, alpha)
        kinds, fastest first; ``None`` if the stage has too few rows."""
        key = (i, j, kinds)
        if key in self._best:
            return self._best[key]
        tab, table = self._intervals(i, j)
        H, m = tab.ref_height, len(kinds)
        res = None
        if H <= MAX_HEIGHT and m <= H:
            b = self.c.bandwidth_bytes_per_s
            bpe = self.c.bytes_per_element
            devs = [DeviceSpec(f"_{k}", cap, al) for k, (cap, al) in enumerate(kinds)]
            inter = 0 if tab.input_local >= 0 else tab.ext_full_elems * bpe
            for cuts in itertools.combinations(range(1, H), m - 1):
                bounds = (0,) + cuts + (H,)
                comm = inter / b
                comp = 0.0
                for k in range(m):
                    f, ie, oe = table[(bounds[k], bounds[k + 1])]
                    comp = max(comp, compute_time(devs[k], f))
                    if k:
                        comm += comm_time(ie * bpe, oe * bpe, b)
                t = comp + comm
                if res is None or t < res[0]:
                    res = (t, bounds)
        self._best[key] = res
        return res


def _kind(d: DeviceSpec) -> tuple[float, float]:
    return (d.capacity_flops, d.alpha)


def _speed(k: tuple[float, float]) -> float:
    return k[0] / k[1]


def oracle_heterogeneous(pieces: PartitionResult, c: Cluster, t_lim: float = INF) -> OracleReport:
    """Exact minimum period over piece splits, device groupings (identical
    devices interchangeable) and strip boundaries.

    Within a stage the fastest device is the master and strips run top to
    bottom from fastest to slowest device.
    """
    L, D = len(pieces.pieces), len(c.devices)
    if L > MAX_HETER[0] or D > MAX_HETER[1]:
        raise InstanceTooLarge(f"instance too large: L={L}, D={D} (limit {MAX_HETER})")
    if L < 1:
        raise PlanError("empty piece chain")
    g = pieces.graph
    for i in range(L):
        if segment_table(g, pieces.pieces[i].vertices).ref_height > MAX_HEIGHT:
            raise InstanceTooLarge(f"instance too large: output height over {MAX_HEIGHT}")
    t0 = time.perf_counter()
    kinds = sorted({_kind(d) for d in c.devices}, key=lambda k: (-_speed(k), k))
    counts = [sum(1 for d in c.devices if _kind(d) == k) for k in kinds]
    search = _StageSearch(pieces, c)
    explored = 0
    feas, allc = [], []
    for S in range(1, min(L, D) + 1):
        per_kind = [list(_spread(n, S + 1)) for n in counts]
        for rngs in _splits(L, S):
            for combo in itertools.product(*per_kind):
                groups = []
                for s in range(S):
                    grp = []
                    for kind, dist in zip(kinds, combo):
                        grp += [kind] * dist[s]
                    groups.append(tuple(grp))
                if any(not grp for grp in groups):
                    continue
                explored += 1
                res = [search.best(i, j, grp) for (i, j), grp in zip(rngs, groups)]
                if any(r is None for r in res):
                    continue
                period, latency = 0.0, 0.0
                for t, _ in res:
                    period = max(period, t)
                    latency += t
                key = tuple((i, j, grp, r[1]) for (i, j), grp, r in zip(rngs, groups, res))
                e = (period, latency, S, key)
                allc.append(e)
                if latency <= t_lim:
                    feas.append(e)

    def build(key):
        pool = {k: [d for d in c.devices if _kind(d) == k] for k in kinds}
        stages = []
        for i, j, grp, bounds in key:
            ds = [pool[k].pop(0) for k in grp]
            seg = pieces.segment(i, j)
            tab = segment_table(g, seg)
            cb = stage_cost_bounds(tab, ds, list(bounds), c.bandwidth_bytes_per_s, c.bytes_per_element)
            stages.append(
                StageConfig((i, j), tuple(d.name for d in ds), tuple(strips_from_bounds(bounds)), cb, VertexSet(seg.mask))
            )
        return make_plan(stages, t_lim, g)

    best = _pick(feas)
    fallback = None
    if best is None and allc:
        fallback = build(min(allc, key=lambda e: (e[1], e[0], e[2], e[3]))[3])
    plan = build(best[3]) if best is not None else None
    return OracleReport(plan, explored, time.perf_counter() - t0, None, fallback)
