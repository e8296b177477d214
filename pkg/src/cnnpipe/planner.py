"""Stage planning: an exact DP on an averaged homogeneous cluster followed by a
greedy adaptation to the real devices."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

from .cost import (
    Cluster,
    CostBreakdown,
    DeviceSpec,
    Region,
    SegmentTable,
    compute_time,
    equal_strips,
    evaluate_segment,
    segment_table,
    stage_cost_bounds,
    strips_from_bounds,
)
from .graph import ModelGraph, VertexSet
from .partition import PartitionResult

log = logging.getLogger(__name__)

INF = math.inf


class PlanError(ValueError):
    pass


class InfeasibleError(PlanError):
    """No configuration meets the latency cap. ``plan`` holds the
    lowest-latency plan found."""

    def __init__(self, message: str, plan: "PipelinePlan | None" = None):
        super().__init__(message)
        self.plan = plan


@dataclass(frozen=True)
class StageConfig:
    piece_range: tuple[int, int]
    device_names: tuple[str, ...]
    strips: tuple[Region, ...]
    cost: CostBreakdown
    segment: VertexSet

    @property
    def master(self) -> str:
        return self.device_names[0]

    @property
    def time_s(self) -> float:
        return self.cost.stage_total_s


@dataclass(frozen=True)
class PipelinePlan:
    stages: tuple[StageConfig, ...]
    predicted_period_s: float
    predicted_latency_s: float
    t_lim_s: float
    graph: ModelGraph | None = None

    @property
    def devices_used(self) -> list[str]:
        return [n for s in self.stages for n in s.device_names]


def _score(stages: Sequence[StageConfig]) -> tuple[float, float]:
    period = 0.0
    latency = 0.0
    for s in stages:
        t = s.cost.stage_total_s
        period = max(period, t)
        latency += t
    return period, latency


def make_plan(stages: Sequence[StageConfig], t_lim: float, g: ModelGraph | None = None) -> PipelinePlan:
    period, latency = _score(stages)
    return PipelinePlan(tuple(stages), period, latency, t_lim, g)


def averaged_cluster(c: Cluster) -> Cluster:
    n = len(c.devices)
    cap = sum(d.capacity_flops for d in c.devices) / n
    alpha = sum(d.alpha for d in c.devices) / n
    devs = [DeviceSpec(d.name, cap, alpha) for d in c.devices]
    return Cluster(devs, c.bandwidth_bytes_per_s, c.bytes_per_element)


def _stage(tab: SegmentTable, rng: tuple[int, int], devices: Sequence[DeviceSpec],
           bounds: Sequence[int], c: Cluster) -> StageConfig:
    cost = stage_cost_bounds(tab, devices, bounds, c.bandwidth_bytes_per_s, c.bytes_per_element)
    strips = strips_from_bounds(bounds, 1, 1)
    return StageConfig(rng, tuple(d.name for d in devices), tuple(strips), cost, VertexSet(tab.mask))


class StageCosts:
    """Memoized ``Ts(i, j, m)`` on a uniform cluster with equal strips."""

    def __init__(self, pieces: PartitionResult, c: Cluster):
        self.pieces = pieces
        self.g = pieces.graph
        self.c = c
        self.template = c.devices[0]
        self._t: dict[tuple[int, int, int], float] = {}
        self._tabs: dict[tuple[int, int], SegmentTable] = {}

    def table(self, i: int, j: int) -> SegmentTable:
        tab = self._tabs.get((i, j))
        if tab is None:
            tab = segment_table(self.g, self.pieces.segment(i, j))
            self._tabs[(i, j)] = tab
        return tab

    def devices(self, m: int) -> list[DeviceSpec]:
        d = self.template
        return [DeviceSpec(f"_{k}", d.capacity_flops, d.alpha) for k in range(m)]

    def __call__(self, i: int, j: int, m: int) -> float:
        key = (i, j, m)
        t = self._t.get(key)
        if t is None:
            tab = self.table(i, j)
            if tab.ref_height < m:
                t = INF
            else:
                cost = stage_cost_bounds(
                    tab, self.devices(m), equal_strips(tab.ref_height, m),
                    self.c.bandwidth_bytes_per_s, self.c.bytes_per_element,
                )
                t = cost.stage_total_s
            self._t[key] = t
        return t


# frontier entry: (period, latency, stage count, ((i, j, m), ...))
Entry = tuple[float, float, int, tuple[tuple[int, int, int], ...]]


def _pareto(cands: list[Entry]) -> list[Entry]:
    cands.sort()
    kept: list[Entry] = []
    for e in cands:
        if any(k[1] <= e[1] and k[2] <= e[2] for k in kept):
            continue
        kept.append(e)
    return kept


def _dp(ts: StageCosts, L: int, D: int, t_lim: float) -> dict[tuple[int, int], list[Entry]]:
    """Frontiers of (period, latency, stages) for pieces ``0..j`` on exactly
    ``p`` devices. Non-dominated entries only, so the optimum under any
    latency cap survives."""
    F: dict[tuple[int, int], list[Entry]] = {}
    for j in range(L):
        for p in range(1, D + 1):
            cands: list[Entry] = []
            # whole prefix as a single stage
            t = ts(0, j, p)
            if t <= t_lim:
                cands.append((t, t, 1, ((0, j, p),)))
            for s in range(j):
                for m in range(1, p):
                    prev = F.get((s, p - m))
                    if not prev:
                        continue
                    t = ts(s + 1, j, m)
                    if t == INF:
                        continue
                    for per, lat, n, rngs in prev:
                        lat2 = lat + t
                        if lat2 > t_lim:
                            continue
                        cands.append((max(per, t), lat2, n + 1, rngs + ((s + 1, j, m),)))
            F[(j, p)] = _pareto(cands)
    return F


def _assemble(ts: StageCosts, c: Cluster, rngs, t_lim: float) -> PipelinePlan:
    names = iter(c.devices)
    stages = []
    for i, j, m in rngs:
        devs = [next(names) for _ in range(m)]
        tab = ts.table(i, j)
        stages.append(_stage(tab, (i, j), devs, equal_strips(tab.ref_height, m), c))
    return make_plan(stages, t_lim, ts.g)


def plan_from_ranges(
    pieces: PartitionResult, c: Cluster, ranges: Sequence[tuple[int, int, int]], t_lim: float = INF
) -> PipelinePlan:
    """Plan with the given ``(first piece, last piece, device count)`` stages,
    equal strips, and devices taken from ``c`` in order."""
    if sum(m for _, _, m in ranges) > len(c.devices):
        raise PlanError("not enough devices for the requested stages")
    nxt = 0
    for i, j, m in ranges:
        if i != nxt or j < i or m < 1:
            raise PlanError("stage ranges must be contiguous and non-empty")
        nxt = j + 1
    if nxt != len(pieces.pieces):
        raise PlanError("stage ranges must cover every piece")
    return _assemble(StageCosts(pieces, c), c, tuple(ranges), t_lim)


def plan_homogeneous(pieces: PartitionResult, c: Cluster, t_lim: float = INF) -> PipelinePlan:
    """Minimum-period plan on a uniform cluster. Ties prefer lower latency,
    then fewer stages, then smaller piece ranges."""
    L = len(pieces.pieces)
    D = len(c.devices)
    if L < 1:
        raise PlanError("empty piece chain")
    if not c.is_uniform:
        raise PlanError("plan_homogeneous needs a uniform cluster")
    ts = StageCosts(pieces, c)
    F = _dp(ts, L, D, t_lim)
    finals = [e for p in range(1, D + 1) for e in F.get((L - 1, p), [])]
    if finals:
        best = min(finals, key=lambda e: (e[0], e[1], e[2], e[3]))
        return _assemble(ts, c, best[3], t_lim)
    F = _dp(ts, L, D, INF)
    finals = [e for p in range(1, D + 1) for e in F.get((L - 1, p), [])]
    if not finals:
        raise PlanError("no stage fits the model on this cluster")
    best = min(finals, key=lambda e: (e[1], e[0], e[2], e[3]))
    fallback = _assemble(ts, c, best[3], t_lim)
    raise InfeasibleError(
        f"no plan meets t_lim={t_lim:g}s; lowest latency is {fallback.predicted_latency_s:.9g}s",
        fallback,
    )


# -- heterogeneous adaptation -------------------------------------------------


def _proportional(height: int, caps: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``height`` rows, at least one row each."""
    n = len(caps)
    total = sum(caps)
    spare = height - n
    raw = [spare * c / total for c in caps]
    rows = [1 + int(math.floor(r)) for r in raw]
    left = height - sum(rows)
    order = sorted(range(n), key=lambda k: (-(raw[k] - math.floor(raw[k])), k))
    for k in order[:left]:
        rows[k] += 1
    return rows


def _rows_to_bounds(rows: Sequence[int]) -> list[int]:
    b = [0]
    for r in rows:
        b.append(b[-1] + r)
    return b


def _compute_times(tab: SegmentTable, devices: Sequence[DeviceSpec], bounds: Sequence[int]) -> list[float]:
    ev = evaluate_segment(tab, bounds)
    return [compute_time(d, int(f)) for d, f in zip(devices, ev.flops)]


def balance_strips(
    tab: SegmentTable, devices: Sequence[DeviceSpec]
) -> tuple[list[DeviceSpec], list[int]]:
    """Row boundaries minimizing the slowest device's compute time.

    Starts from a capacity-proportional split and moves one boundary by one
    row at a time while that strictly improves the sorted vector of compute
    times (so the maximum never rises). Devices beyond the number of rows
    are dropped, slowest first.
    """
    devs = list(devices)
    H = tab.ref_height
    if len(devs) > H:
        log.warning("stage has %d rows but %d devices; dropping %d", H, len(devs), len(devs) - H)
        devs = sorted(devs, key=lambda d: -d.capacity_flops / d.alpha)[:H]
    n = len(devs)
    bounds = _rows_to_bounds(_proportional(H, [d.capacity_flops / d.alpha for d in devs]))
    if n == 1:
        return devs, bounds

    def key(b):
        return tuple(sorted(_compute_times(tab, devs, b), reverse=True))

    cur = key(bounds)
    while True:
        best_b, best_k = None, cur
        for k in range(1, n):
            for step in (-1, 1):
                nb = list(bounds)
                nb[k] += step
                if nb[k] <= nb[k - 1] or nb[k] >= nb[k + 1]:
                    continue
                kk = key(nb)
                if kk < best_k:
                    best_b, best_k = nb, kk
        if best_b is None:
            return devs, bounds
        bounds, cur = best_b, best_k


def _by_capacity(devices: Sequence[DeviceSpec]) -> list[DeviceSpec]:
    return sorted(devices, key=lambda d: -d.capacity_flops / d.alpha)


def adapt_heterogeneous(
    plan_h: PipelinePlan, c: Cluster, select: str = "max"
) -> PipelinePlan:
    """Reassign real devices to the stages of a homogeneous plan.

    Devices are visited fastest first. With ``select="max"`` each goes to the
    unfilled stage with the largest requirement per device already placed
    (empty stages first); ``select="min"`` picks the smallest requirement per
    remaining slot instead.
    """
    g = plan_h.graph
    if g is None:
        raise PlanError("plan carries no model graph")
    need = len(plan_h.devices_used)
    if len(c.devices) < need:
        raise PlanError(f"plan uses {need} devices, cluster has {len(c.devices)}")
    if select not in ("max", "min"):
        raise PlanError("select must be 'max' or 'min'")
    slots = [len(s.device_names) for s in plan_h.stages]
    theta = [float(s.cost.total_flops) for s in plan_h.stages]
    assigned: list[list[DeviceSpec]] = [[] for _ in plan_h.stages]
    for d in _by_capacity(c.devices)[:need]:
        open_ = [k for k in range(len(slots)) if len(assigned[k]) < slots[k]]
        if select == "max":
            k = max(open_, key=lambda k: (theta[k] / len(assigned[k]) if assigned[k] else INF, theta[k], -k))
        else:
            k = min(open_, key=lambda k: (theta[k] / (slots[k] - len(assigned[k])), k))
        assigned[k].append(d)
    stages = []
    for s, devs in zip(plan_h.stages, assigned):
        tab = segment_table(g, s.segment)
        devs = _by_capacity(devs)
        uniform = all(
            d.capacity_flops == devs[0].capacity_flops and d.alpha == devs[0].alpha for d in devs
        )
        if uniform and len(devs) <= tab.ref_height:
            bounds = equal_strips(tab.ref_height, len(devs))
        else:
            devs, bounds = balance_strips(tab, devs)
        stages.append(_stage(tab, s.piece_range, devs, bounds, c))
    return make_plan(stages, plan_h.t_lim_s, g)


def plan(pieces: PartitionResult, c: Cluster, t_lim: float = INF, select: str = "max") -> PipelinePlan:
    """Plan on the averaged cluster, then adapt to the real devices."""
    if not pieces.pieces:
        raise PlanError("empty piece chain")
    if c.is_uniform:
        return plan_homogeneous(pieces, c, t_lim)
    try:
        ph = plan_homogeneous(pieces, averaged_cluster(c), t_lim)
    except InfeasibleError as e:
        fallback = adapt_heterogeneous(e.plan, c, select) if e.plan is not None else None
        raise InfeasibleError(str(e), fallback) from None
    out = adapt_heterogeneous(ph, c, select)
    if out.predicted_latency_s > t_lim:
        raise InfeasibleError(
            f"adapted plan latency {out.predicted_latency_s:.9g}s exceeds t_lim={t_lim:g}s", out
        )
    return out


def with_limit(p: PipelinePlan, t_lim: float) -> PipelinePlan:
    return replace(p, t_lim_s=t_lim)
