"""Closed-form cost model: feature regions, FLOPs, compute and transfer time.

Feature maps are partitioned into horizontal strips (full width). Every
region is a contiguous row interval of a layer's full output map. Zero
padding only applies at true map borders; interior strip edges read halo
rows instead, and those halo rows are what makes fused layers recompute
work on neighbouring devices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .graph import LayerSpec, ModelGraph, VertexSet

__all__ = [
    "Region",
    "LayerRegions",
    "RegionMap",
    "DeviceSpec",
    "Cluster",
    "CostBreakdown",
    "SegmentTable",
    "required_input_region",
    "forward_output_region",
    "propagate_required",
    "propagate_actual",
    "layer_flops",
    "segment_flops",
    "compute_time",
    "feature_bytes",
    "comm_time",
    "equal_strips",
    "strips_from_bounds",
    "stage_cost",
    "segment_table",
    "evaluate_segment",
    "piece_redundancy",
    "receptive_field",
    "MBPS",
]

MBPS = 125_000.0  # bytes per second in one megabit per second


@dataclass(frozen=True)
class Region:
    channels: int
    height_rows: int
    width_cols: int
    row_offset: int = 0

    @property
    def empty(self) -> bool:
        return self.height_rows <= 0

    @property
    def row_end(self) -> int:
        return self.row_offset + self.height_rows

    @property
    def elements(self) -> int:
        return self.channels * max(self.height_rows, 0) * self.width_cols


@dataclass(frozen=True)
class LayerRegions:
    required_input: Region
    actual_output: Region


@dataclass
class RegionMap:
    layers: dict[int, LayerRegions] = field(default_factory=dict)
    # regions read from outside the segment, keyed by producer id
    sources: dict[int, Region] = field(default_factory=dict)

    def __getitem__(self, i: int) -> LayerRegions:
        return self.layers[i]

    def __contains__(self, i: int) -> bool:
        return i in self.layers


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    capacity_flops: float
    alpha: float = 1.0

    def __post_init__(self):
        if not self.capacity_flops > 0:
            raise ValueError(f"device {self.name}: capacity must be positive")
        if not self.alpha > 0:
            raise ValueError(f"device {self.name}: alpha must be positive")


@dataclass(frozen=True)
class Cluster:
    devices: tuple[DeviceSpec, ...]
    bandwidth_bytes_per_s: float
    bytes_per_element: int = 4

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.devices:
            raise ValueError("cluster needs at least one device")
        if not self.bandwidth_bytes_per_s > 0:
            raise ValueError("bandwidth must be positive")
        names = [d.name for d in self.devices]
        if len(set(names)) != len(names):
            raise ValueError("device names must be unique")

    def device(self, name: str) -> DeviceSpec:
        for d in self.devices:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def is_uniform(self) -> bool:
        return len({(d.capacity_flops, d.alpha) for d in self.devices}) == 1


@dataclass(frozen=True)
class CostBreakdown:
    t_comp_per_device: dict[str, float]
    t_comm_per_device: dict[str, float]
    stage_compute_s: float
    stage_comm_s: float
    stage_total_s: float
    redundant_flops: int
    total_flops: int
    flops_per_device: dict[str, int] = field(default_factory=dict)
    redundant_per_device: dict[str, int] = field(default_factory=dict)
    in_bytes_per_device: dict[str, int] = field(default_factory=dict)
    out_bytes_per_device: dict[str, int] = field(default_factory=dict)
    inter_stage_bytes: int = 0


# -- single-layer geometry -------------------------------------------------


def required_input_region(
    layer: LayerSpec, out: Region, full_in: tuple[int, int] | None = None, in_channels: int | None = None
) -> Region:
    """Input region a layer reads to produce ``out``.

    Without ``full_in`` this is the bare window arithmetic ``(h - 1) * s + k``.
    With ``full_in = (H, W)`` the exact span of touched input rows and columns
    is returned, with padding and clamping at the map borders.
    """
    if out.empty or out.width_cols <= 0:
        raise ValueError("required_input_region of an empty region")
    if not layer.is_weighted:
        return out
    (kh, kw), (sh, sw), (ph, pw) = layer.k, layer.s, layer.p
    chans = layer.in_channels if layer.kind == "conv" else (in_channels or out.channels)
    if full_in is None:
        return Region(
            channels=chans,
            height_rows=(out.height_rows - 1) * sh + kh,
            width_cols=(out.width_cols - 1) * sw + kw,
            row_offset=out.row_offset * sh - ph,
        )
    H, W = full_in
    r0, r1 = kernels.touched_rows(out.row_offset, out.row_end, kh, sh, ph, H)
    c0, c1 = kernels.touched_rows(0, out.width_cols, kw, sw, pw, W)
    return Region(channels=chans, height_rows=r1 - r0, width_cols=c1 - c0, row_offset=r0)


def forward_output_region(
    layer: LayerSpec,
    inp: Region,
    clamp_padding: bool = False,
    full_in: tuple[int, int] | None = None,
) -> Region:
    """Output region computable from ``inp``.

    With ``clamp_padding`` the padding only counts on sides where the strip
    touches the border of the full map (``full_in`` is then required); the
    result is the exact set of output rows whose window lies inside the strip.
    """
    if inp.empty:
        raise ValueError("forward_output_region of an empty region")
    if not layer.is_weighted:
        return inp
    (kh, kw), (sh, sw), (ph, pw) = layer.k, layer.s, layer.p
    chans = layer.out_channels if layer.kind == "conv" else inp.channels
    if not clamp_padding:
        oh = (inp.height_rows + 2 * ph - kh) // sh + 1
        ow = (inp.width_cols + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"layer {layer.id}: input too small for kernel")
        return Region(chans, oh, ow, -(-inp.row_offset // sh))
    if full_in is None:
        raise ValueError("clamp_padding needs the full input size")
    H, W = full_in
    full_oh = (H + 2 * ph - kh) // sh + 1
    first = 0 if inp.row_offset == 0 else -(-(inp.row_offset + ph) // sh)
    end_eff = inp.row_end + (ph if inp.row_end >= H else 0)
    last = min((end_eff + ph - kh) // sh, full_oh - 1)
    ow = (inp.width_cols + pw + (pw if inp.width_cols >= W else 0) - kw) // sw + 1
    if last < first or ow < 1:
        raise ValueError(f"layer {layer.id}: input strip too small for kernel")
    return Region(chans, last - first + 1, ow, first)


def layer_flops(layer: LayerSpec, out: Region) -> int:
    """FLOP count of a conv layer; zero for every other kind."""
    if layer.kind != "conv" or out.empty:
        return 0
    kh, kw = layer.k
    return kh * kw * layer.in_channels * out.height_rows * out.width_cols * layer.out_channels


def compute_time(d: DeviceSpec, flops: float) -> float:
    if not d.capacity_flops > 0:
        raise ValueError("device capacity must be positive")
    return d.alpha * flops / d.capacity_flops


def feature_bytes(r: Region, bytes_per_element: int = 4) -> int:
    if r.empty:
        return 0
    return r.channels * r.height_rows * r.width_cols * bytes_per_element


def comm_time(bytes_in: int, bytes_out: int, b: float) -> float:
    return (bytes_in + bytes_out) / b


# -- region propagation over a segment ---------------------------------------


def _segment_ids(segment: VertexSet, g: ModelGraph) -> list[int]:
    return [v for v in g.topo if v in segment]


def sinks_of(segment: VertexSet, g: ModelGraph) -> list[int]:
    """Members whose output leaves the segment (or leaves the model)."""
    out = []
    for v in _segment_ids(segment, g):
        succ = g.succ(v)
        if not succ or any(w not in segment for w in succ):
            out.append(v)
    return out


def _full_in(g: ModelGraph, v: int) -> tuple[int, int]:
    _, h, w = g.in_shape(v)
    return h, w


def propagate_required(
    segment: VertexSet, g: ModelGraph, sink_regions: Mapping[int, Region]
) -> RegionMap:
    """Top-down pass: each layer's output need is the row span of all demands
    placed on it; its input need follows from the window arithmetic."""
    ids = _segment_ids(segment, g)
    sinks = sinks_of(segment, g)
    for s in sinks:
        if s not in sink_regions:
            raise KeyError(f"missing region for sink layer {s}")
    rm = RegionMap()
    for v in reversed(ids):
        layer = g.layers[v]
        c, h, w = g.shapes[v]
        demands = []
        if v in sink_regions and not sink_regions[v].empty:
            demands.append(sink_regions[v])
        for u in g.succ(v):
            if u in rm.layers and not rm.layers[u].required_input.empty:
                demands.append(rm.layers[u].required_input)
        if not demands:
            empty = Region(c, 0, w, 0)
            rm.layers[v] = LayerRegions(Region(c, 0, w, 0), empty)
            continue
        lo = min(r.row_offset for r in demands)
        hi = max(r.row_end for r in demands)
        out = Region(c, hi - lo, w, lo)
        if layer.kind == "input":
            need = out
        else:
            need = required_input_region(
                layer, out, full_in=_full_in(g, v), in_channels=g.in_shape(v)[0]
            )
            if not layer.is_weighted:
                need = out
        rm.layers[v] = LayerRegions(need, out)
    for v in ids:
        if v == g.input_id:
            rm.sources[v] = rm.layers[v].required_input
        for p in g.pred(v):
            if p in segment:
                continue
            need = rm.layers[v].required_input
            pc = g.shapes[p][0]
            prev = rm.sources.get(p)
            if need.empty:
                continue
            if prev is None or prev.empty:
                rm.sources[p] = Region(pc, need.height_rows, need.width_cols, need.row_offset)
            else:
                lo = min(prev.row_offset, need.row_offset)
                hi = max(prev.row_end, need.row_end)
                rm.sources[p] = Region(pc, hi - lo, need.width_cols, lo)
    return rm


def propagate_actual(
    segment: VertexSet, g: ModelGraph, source_inputs: Mapping[int, Region]
) -> RegionMap:
    """Bottom-up pass from the regions available at the segment sources.

    ``source_inputs`` maps each source layer (a member fed from outside, or
    the model input) to the input region it receives.
    """
    ids = _segment_ids(segment, g)
    rm = RegionMap()
    for v in ids:
        layer = g.layers[v]
        ins: list[Region] = []
        if v in source_inputs:
            ins.append(source_inputs[v])
        for p in g.pred(v):
            if p in segment:
                ins.append(rm.layers[p].actual_output)
        if not ins:
            if v == g.input_id or any(p not in segment for p in g.pred(v)):
                raise KeyError(f"missing input region for source layer {v}")
            raise KeyError(f"layer {v} has no input")
        if len(ins) == 1:
            inp = ins[0]
        else:
            widths = {r.width_cols for r in ins}
            if len(widths) != 1:
                raise ValueError(f"shape mismatch at connector {v}")
            lo = max(r.row_offset for r in ins)
            hi = min(r.row_end for r in ins)
            if hi <= lo:
                raise ValueError(f"shape mismatch at connector {v}: disjoint row ranges")
            if layer.kind == "add":
                if len({r.channels for r in ins}) != 1:
                    raise ValueError(f"channel mismatch at add connector {v}")
                chans = ins[0].channels
            else:
                chans = sum(r.channels for r in ins)
            inp = Region(chans, hi - lo, ins[0].width_cols, lo)
        if layer.kind == "input" or not layer.is_weighted:
            out = inp
        else:
            out = forward_output_region(layer, inp, clamp_padding=True, full_in=_full_in(g, v))
        rm.layers[v] = LayerRegions(inp, out)
    return rm


def segment_flops(segment: VertexSet, rm: RegionMap, g: ModelGraph) -> int:
    return sum(layer_flops(g.layers[v], rm.layers[v].actual_output) for v in segment if v in rm)


# -- segment tables and the fast evaluation path ------------------------------


@dataclass(frozen=True)
class SegmentTable:
    """Flattened description of a segment consumed by the row kernels."""

    mask: int
    ids: tuple[int, ...]
    kh: np.ndarray
    sh: np.ndarray
    ph: np.ndarray
    hin: np.ndarray
    cons_ptr: np.ndarray
    cons_idx: np.ndarray
    sinks: tuple[int, ...]  # local indices
    sink_heights: tuple[int, ...]
    flops_row: np.ndarray
    row_elems: np.ndarray
    # (row elements, consumer local indices) per producer outside the segment
    ext: tuple[tuple[int, np.ndarray], ...]
    ext_full_elems: int
    input_local: int  # -1 when the layer fed by the frame is not in the segment
    input_row_elems: int  # frame elements per row
    ref_height: int
    conv_params: int  # weights + biases of conv layers

    @property
    def n(self) -> int:
        return len(self.ids)


def segment_table(g: ModelGraph, segment: VertexSet | int) -> SegmentTable:
    mask = segment.mask if isinstance(segment, VertexSet) else segment
    cache = g.segment_cache
    tab = cache.get(mask)
    if tab is not None:
        return tab
    ids = [v for v in g.topo if mask >> v & 1]
    if not ids:
        raise ValueError("empty segment")
    local = {v: n for n, v in enumerate(ids)}
    n = len(ids)
    kh = np.ones(n, np.int64); sh = np.ones(n, np.int64); ph = np.zeros(n, np.int64)
    hin = np.zeros(n, np.int64); flops_row = np.zeros(n, np.int64); row_elems = np.zeros(n, np.int64)
    ptr = [0]; idx: list[int] = []
    sinks = []; sink_h = []
    ext: dict[int, list[int]] = {}
    input_local = -1
    params = 0
    for v in ids:
        i = local[v]
        layer = g.layers[v]
        c, h, w = g.shapes[v]
        row_elems[i] = c * w
        if layer.is_weighted:
            kh[i], sh[i], ph[i] = layer.k[0], layer.s[0], layer.p[0]
            hin[i] = g.in_shape(v)[1]
        else:
            hin[i] = h
        if layer.kind == "conv":
            flops_row[i] = layer.k[0] * layer.k[1] * layer.in_channels * layer.out_channels * w
            params += layer.k[0] * layer.k[1] * layer.in_channels * layer.out_channels + layer.out_channels
        if v == g.input_id:
            input_local = i
        succ = g.succ(v)
        for u in succ:
            if mask >> u & 1:
                idx.append(local[u])
        ptr.append(len(idx))
        if not succ or any(not mask >> u & 1 for u in succ):
            sinks.append(i)
            sink_h.append(h)
        for p in g.pred(v):
            if not mask >> p & 1:
                ext.setdefault(p, []).append(i)
    ext_t = []
    ext_full = 0
    for p in sorted(ext):
        pc, phh, pw = g.shapes[p]
        ext_t.append((pc * pw, np.array(ext[p], np.int64)))
        ext_full += pc * phh * pw
    tab = SegmentTable(
        mask=mask,
        ids=tuple(ids),
        kh=kh, sh=sh, ph=ph, hin=hin,
        cons_ptr=np.array(ptr, np.int64),
        cons_idx=np.array(idx, np.int64),
        sinks=tuple(sinks),
        sink_heights=tuple(sink_h),
        flops_row=flops_row,
        row_elems=row_elems,
        ext=tuple(ext_t),
        ext_full_elems=ext_full,
        input_local=input_local,
        input_row_elems=g.input_shape[0] * g.input_shape[2],
        ref_height=max(sink_h),
        conv_params=params,
    )
    cache[mask] = tab
    return tab


def equal_strips(height: int, parts: int) -> list[int]:
    """Boundaries of ``parts`` near-equal strips; the first ones get the extra rows."""
    if parts < 1:
        raise ValueError("need at least one strip")
    q, r = divmod(height, parts)
    bounds = [0]
    for k in range(parts):
        bounds.append(bounds[-1] + q + (1 if k < r else 0))
    return bounds


def strips_from_bounds(bounds: Sequence[int], channels: int = 1, width: int = 1) -> list[Region]:
    return [Region(channels, b - a, width, a) for a, b in zip(bounds, bounds[1:])]


def bounds_from_strips(strips: Sequence[Region], height: int) -> list[int]:
    bounds = [0]
    for s in strips:
        if s.row_offset != bounds[-1] or s.height_rows < 0:
            raise ValueError("strips do not tile the output height")
        bounds.append(s.row_end)
    if bounds[-1] != height:
        raise ValueError(f"strips cover {bounds[-1]} rows, output has {height}")
    return bounds


@dataclass(frozen=True)
class SegmentEval:
    out_start: np.ndarray
    out_end: np.ndarray
    flops: np.ndarray  # per device
    redundant: np.ndarray  # per device
    union_flops: int
    in_elems: np.ndarray
    out_elems: np.ndarray
    in_start: np.ndarray | None = None
    in_end: np.ndarray | None = None


def evaluate_segment(tab: SegmentTable, bounds: Sequence[int]) -> SegmentEval:
    """Rows, FLOPs and transfer volume per device for strip ``bounds`` given
    on the segment's reference height."""
    m = len(bounds) - 1
    n = tab.n
    href = tab.ref_height
    ss = np.full((m, n), -1, np.int64)
    se = np.full((m, n), -1, np.int64)
    out_elems = np.zeros(m, np.int64)
    for li, hs in zip(tab.sinks, tab.sink_heights):
        for d in range(m):
            a = bounds[d] * hs // href
            b = bounds[d + 1] * hs // href
            ss[d, li] = a
            se[d, li] = b
            out_elems[d] += (b - a) * tab.row_elems[li]
    os_, oe, is_, ie = kernels.segment_rows(
        tab.kh, tab.sh, tab.ph, tab.hin, tab.cons_ptr, tab.cons_idx, ss, se
    )
    rows = oe - os_
    flops = rows @ tab.flops_row
    owned = kernels.owned_rows(os_, oe)
    redundant = (rows - owned) @ tab.flops_row
    union_flops = int(owned.sum(axis=0) @ tab.flops_row)
    in_elems = np.zeros(m, np.int64)
    for elems, cons in tab.ext:
        a = is_[:, cons]
        b = ie[:, cons]
        live = b > a
        lo = np.where(live, a, np.iinfo(np.int64).max).min(axis=1)
        hi = np.where(live, b, -1).max(axis=1)
        in_elems += np.where(hi > lo, hi - lo, 0) * elems
    if tab.input_local >= 0:
        il = tab.input_local
        in_elems += (ie[:, il] - is_[:, il]) * tab.input_row_elems
    return SegmentEval(os_, oe, flops, redundant, union_flops, in_elems, out_elems, is_, ie)


def stage_cost_bounds(
    tab: SegmentTable,
    devices: Sequence[DeviceSpec],
    bounds: Sequence[int],
    bandwidth: float,
    bytes_per_element: int = 4,
) -> CostBreakdown:
    """Stage cost for strip boundaries; ``devices[0]`` is the master."""
    ev = evaluate_segment(tab, bounds)
    t_comp: dict[str, float] = {}
    t_comm: dict[str, float] = {}
    inter_bytes = 0 if tab.input_local >= 0 else tab.ext_full_elems * bytes_per_element
    comm_total = inter_bytes / bandwidth
    for k, d in enumerate(devices):
        t_comp[d.name] = compute_time(d, int(ev.flops[k]))
        if k == 0:
            t_comm[d.name] = inter_bytes / bandwidth
        else:
            t = comm_time(
                int(ev.in_elems[k]) * bytes_per_element,
                int(ev.out_elems[k]) * bytes_per_element,
                bandwidth,
            )
            t_comm[d.name] = t
            comm_total += t
    comp = max(t_comp.values())
    names = [d.name for d in devices]
    return CostBreakdown(
        t_comp_per_device=t_comp,
        t_comm_per_device=t_comm,
        stage_compute_s=comp,
        stage_comm_s=comm_total,
        stage_total_s=comp + comm_total,
        redundant_flops=int(ev.flops.sum()) - ev.union_flops,
        total_flops=int(ev.flops.sum()),
        flops_per_device=dict(zip(names, map(int, ev.flops))),
        redundant_per_device=dict(zip(names, map(int, ev.redundant))),
        in_bytes_per_device=dict(zip(names, (int(x) * bytes_per_element for x in ev.in_elems))),
        out_bytes_per_device=dict(zip(names, (int(x) * bytes_per_element for x in ev.out_elems))),
        inter_stage_bytes=inter_bytes,
    )


def stage_cost(
    segment: VertexSet,
    devices: Sequence[DeviceSpec],
    strips: Sequence[Region],
    g: ModelGraph,
    b: float,
    bytes_per_element: int = 4,
) -> CostBreakdown:
    """Cost of one pipeline stage.

    ``strips`` are the per-device output rows on the stage's reference height
    (the tallest sink); other sinks are split at proportional boundaries.
    The first device is the master: it pays no scatter/gather time but
    receives the stage input from the previous stage.
    """
    if len(strips) != len(devices) or not devices:
        raise ValueError("need one strip per device")
    tab = segment_table(g, segment)
    bounds = bounds_from_strips(strips, tab.ref_height)
    return stage_cost_bounds(tab, devices, bounds, b, bytes_per_element)


def piece_redundancy(piece: VertexSet, g: ModelGraph) -> int:
    """Extra FLOPs a piece incurs when its output is split into two equal
    strips, relative to computing it whole."""
    tab = segment_table(g, piece)
    if tab.ref_height < 2:
        return 0
    ev = evaluate_segment(tab, equal_strips(tab.ref_height, 2))
    return int(ev.flops.sum()) - ev.union_flops


def receptive_field(piece: VertexSet, g: ModelGraph) -> tuple[int, int]:
    """Input extent (rows, cols) behind one output pixel of the piece.

    Window arithmetic without border clamping; demands from several
    consumers combine by maximum.
    """
    ids = _segment_ids(piece, g)
    need: dict[int, tuple[int, int]] = {}
    inext: dict[int, tuple[int, int]] = {}
    best = (1, 1)
    for v in reversed(ids):
        layer = g.layers[v]
        hs, ws = [], []
        succ = g.succ(v)
        if not succ or any(u not in piece for u in succ):
            hs.append(1); ws.append(1)
        for u in succ:
            if u in inext:
                hs.append(inext[u][0]); ws.append(inext[u][1])
        h, w = max(hs), max(ws)
        need[v] = (h, w)
        if layer.is_weighted:
            (kh, kw), (sh, sw) = layer.k, layer.s
            inext[v] = ((h - 1) * sh + kh, (w - 1) * sw + kw)
        else:
            inext[v] = (h, w)
        is_source = v == g.input_id or any(p not in piece for p in g.pred(v))
        if is_source:
            ext = need[v] if layer.kind == "input" else inext[v]
            best = (max(best[0], ext[0]), max(best[1], ext[1]))
    return best
