"""Discrete-event replay of a pipeline plan over a stream of frames."""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field

from .cost import Cluster, CostBreakdown, evaluate_segment, segment_table, stage_cost_bounds
from .cost import bounds_from_strips
from .graph import ModelGraph
from .planner import PipelinePlan, StageConfig


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    frames: int = 100
    arrival: str | float = "saturated"  # or a fixed inter-arrival time in seconds
    jitter_pct: float = 0.0
    seed: int = 0
    queue_capacity: int = 1
    record_timeline: bool = False

    def __post_init__(self):
        if self.frames < 1:
            raise SimError("frames must be at least 1")
        if self.queue_capacity < 1:
            raise SimError("queue_capacity must be at least 1 (a zero-length queue deadlocks)")
        if self.jitter_pct < 0 or self.jitter_pct >= 100:
            raise SimError("jitter_pct must be in [0, 100)")
        if self.arrival != "saturated":
            if isinstance(self.arrival, str) or not self.arrival >= 0:
                raise SimError("arrival must be 'saturated' or a non-negative interval")


@dataclass(frozen=True)
class DeviceReport:
    stage: int
    utilization_pct: float
    redundancy_pct: float
    mem_bytes_model: int
    mem_bytes_feature: int
    busy_s: float


@dataclass(frozen=True)
class SimReport:
    measured_period_s: float
    measured_latency_s: float
    predicted_period_s: float
    predicted_latency_s: float
    frames: int
    warmup_frames: int
    per_device: dict[str, DeviceReport]
    departures: tuple[float, ...]
    starts: tuple[float, ...]
    timeline: list[tuple[float, str, int, str, int]] | None = field(default=None, repr=False)

    @property
    def throughput_fpm(self) -> float:
        return 60.0 / self.measured_period_s if self.measured_period_s > 0 else math.inf


def estimate_memory(
    stage: StageConfig, g: ModelGraph, bytes_per_element: int = 4
) -> dict[str, tuple[int, int]]:
    """Per-device (model bytes, peak live feature bytes) for one stage.

    Every device holds the full weights of the stage. Feature memory walks
    the stage's layers in topological order and keeps each produced strip
    alive until its last consumer in the stage has run.
    """
    tab = segment_table(g, stage.segment)
    model = tab.conv_params * bytes_per_element
    bounds = bounds_from_strips(stage.strips, tab.ref_height)
    ev = evaluate_segment(tab, bounds)
    n = tab.n
    last_use = list(range(n))
    for i in range(n):
        for c in tab.cons_idx[tab.cons_ptr[i]:tab.cons_ptr[i + 1]]:
            last_use[i] = max(last_use[i], int(c))
    sinks = set(tab.sinks)
    out = {}
    for d, name in enumerate(stage.device_names):
        rows = ev.out_end[d] - ev.out_start[d]
        ext_live = []  # (elements, last consumer)
        for elems, cons in tab.ext:
            a = ev.in_start[d, cons]
            b = ev.in_end[d, cons]
            live = b > a
            if not live.any():
                continue
            span = int(b[live].max() - a[live].min())
            ext_live.append((span * elems, int(cons.max())))
        live_ext = sum(e for e, _ in ext_live)
        peak = live_ext
        alive: dict[int, int] = {}
        for i in range(n):
            alive[i] = int(rows[i] * tab.row_elems[i])
            peak = max(peak, live_ext + sum(alive.values()))
            for e, lc in ext_live:
                if lc == i:
                    live_ext -= e
            for k in [k for k in alive if last_use[k] <= i and k not in sinks]:
                del alive[k]
        out[name] = (model, int(peak) * bytes_per_element)
    return out


@dataclass
class _StageState:
    queue: deque = field(default_factory=deque)
    busy: int | None = None
    blocked: int | None = None


def _stage_costs(plan: PipelinePlan, c: Cluster, g: ModelGraph) -> list[CostBreakdown]:
    out = []
    for s in plan.stages:
        try:
            devs = [c.device(n) for n in s.device_names]
        except KeyError as e:
            raise SimError(f"plan references unknown device {e.args[0]!r}") from None
        tab = segment_table(g, s.segment)
        bounds = bounds_from_strips(s.strips, tab.ref_height)
        out.append(stage_cost_bounds(tab, devs, bounds, c.bandwidth_bytes_per_s, c.bytes_per_element))
    return out


def simulate(plan: PipelinePlan, c: Cluster, cfg: SimConfig = SimConfig(), g: ModelGraph | None = None) -> SimReport:
    """Replay ``plan`` on ``c``.

    Each stage serves one frame at a time: the master receives the stage
    input, scatters strips to its peers one after another, all devices
    compute, then the master gathers results one after another. A finished
    frame waits in place while the next stage's queue is full.
    """
    g = g or plan.graph
    if g is None:
        raise SimError("plan carries no model graph")
    if not plan.stages:
        raise SimError("plan has no stages")
    used = plan.devices_used
    if len(set(used)) != len(used):
        raise SimError("a device appears in more than one stage")
    costs = _stage_costs(plan, c, g)
    S = len(plan.stages)
    N = cfg.frames
    b = c.bandwidth_bytes_per_s
    j = cfg.jitter_pct / 100.0
    rng = random.Random(cfg.seed)

    def jit(x: float) -> float:
        if j == 0 or x == 0:
            return x
        return x * rng.uniform(1 - j, 1 + j)

    st = [_StageState() for _ in range(S)]
    events: list = []
    seq = 0

    def push(t, kind, k, f):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, k, f))
        seq += 1

    start1 = [0.0] * N
    depart = [0.0] * N
    busy_iv: dict[str, list[tuple[float, float]]] = {n: [] for n in used}
    timeline = [] if cfg.record_timeline else None

    def log(t, ev, k, dev, f):
        if timeline is not None:
            timeline.append((t, ev, k, dev, f))

    def serve(k: int, f: int, t: float) -> None:
        s = plan.stages[k]
        cb = costs[k]
        names = s.device_names
        master = names[0]
        if k == 0:
            start1[f] = t
        log(t, "start", k, master, f)
        now = t + jit(cb.inter_stage_bytes / b)
        for n in names[1:]:
            now += jit(cb.in_bytes_per_device[n] / b)
        comp_end = now
        for n in names:
            dt = jit(cb.t_comp_per_device[n])
            busy_iv[n].append((now, now + dt))
            log(now, "compute_start", k, n, f)
            log(now + dt, "compute_end", k, n, f)
            comp_end = max(comp_end, now + dt)
        now = comp_end
        for n in names[1:]:
            now += jit(cb.out_bytes_per_device[n] / b)
        push(now, "done", k, f)

    def settle(t: float) -> None:
        changed = True
        while changed:
            changed = False
            for k in range(S - 1, -1, -1):
                ss = st[k]
                if ss.blocked is not None and len(st[k + 1].queue) < cfg.queue_capacity:
                    st[k + 1].queue.append(ss.blocked)
                    log(t, "enqueue", k + 1, plan.stages[k + 1].master, ss.blocked)
                    ss.blocked = None
                    changed = True
                if ss.busy is None and ss.blocked is None and ss.queue:
                    f = ss.queue.popleft()
                    ss.busy = f
                    serve(k, f, t)
                    changed = True

    if cfg.arrival == "saturated":
        st[0].queue.extend(range(N))
    else:
        for f in range(N):
            push(f * float(cfg.arrival), "arrive", 0, f)
    settle(0.0)
    while events:
        t, _, kind, k, f = heapq.heappop(events)
        if kind == "arrive":
            st[0].queue.append(f)
            log(t, "arrive", 0, plan.stages[0].master, f)
        else:
            ss = st[k]
            ss.busy = None
            log(t, "done", k, plan.stages[k].master, f)
            if k == S - 1:
                depart[f] = t
                log(t, "depart", k, plan.stages[k].master, f)
            else:
                ss.blocked = f
        settle(t)

    w = min(math.ceil(0.1 * N), N - 1)
    if w >= 1:
        period = (depart[N - 1] - depart[w - 1]) / (N - w)
    else:  # a single frame
        period = depart[0] - start1[0]
    lat = [depart[f] - start1[f] for f in range(w, N)]
    latency = math.fsum(lat) / len(lat)

    span = depart[N - 1] - (depart[w - 1] if w >= 1 else start1[0])
    per_device = {}
    for k, s in enumerate(plan.stages):
        mem = estimate_memory(s, g, c.bytes_per_element)
        cb = costs[k]
        for n in s.device_names:
            iv = busy_iv[n]
            # frames are served in order, so interval f belongs to frame f
            steady = math.fsum(e - a for a, e in iv[w:])
            util = 100.0 * steady / span if span > 0 else 0.0
            fl = cb.flops_per_device[n]
            red = 100.0 * cb.redundant_per_device[n] / fl if fl else 0.0
            per_device[n] = DeviceReport(
                stage=k,
                utilization_pct=min(100.0, util),
                redundancy_pct=red,
                mem_bytes_model=mem[n][0],
                mem_bytes_feature=mem[n][1],
                busy_s=math.fsum(e - a for a, e in iv),
            )
    if timeline is not None:
        timeline.sort(key=lambda r: r[0])
    return SimReport(
        measured_period_s=period,
        measured_latency_s=latency,
        predicted_period_s=plan.predicted_period_s,
        predicted_latency_s=plan.predicted_latency_s,
        frames=N,
        warmup_frames=w,
        per_device=per_device,
        departures=tuple(depart),
        starts=tuple(start1),
        timeline=timeline,
    )

