"""Reading and writing model, cluster, piece, plan and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any

from .cost import MBPS, Cluster, DeviceSpec, segment_table, stage_cost_bounds, bounds_from_strips
from .cost import strips_from_bounds
from .graph import ModelError, ModelGraph, VertexSet, chain_valid, model_from_dict, parse_model
from .partition import Piece, PartitionResult, _interfaces
from .planner import PipelinePlan, StageConfig, make_plan
from .simulator import SimReport

CSV_FIELDS = ("device", "stage", "utilization_pct", "redundancy_pct", "model_bytes", "feature_bytes")


class FileFormatError(ValueError):
    pass


def fmt(x: float) -> float | None:
    """Round to 9 significant digits; infinity becomes ``None``."""
    if x is None or math.isinf(x):
        return None
    return float(format(x, ".9g"))


def dumps(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _load_json(text: str | bytes, what: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{what}: line {e.lineno} column {e.colno}: {e.msg}") from None


def _check_fields(doc: dict, allowed: set, required: set, what: str) -> None:
    if not isinstance(doc, dict):
        raise FileFormatError(f"{what}: expected an object")
    extra = set(doc) - allowed
    if extra:
        raise FileFormatError(f"{what}: unknown field(s) {sorted(extra)}")
    missing = required - set(doc)
    if missing:
        raise FileFormatError(f"{what}: missing field(s) {sorted(missing)}")


# -- models and clusters ------------------------------------------------------


def read_model(path: str | Path) -> ModelGraph:
    return parse_model(Path(path).read_bytes())


def parse_cluster(text: str | bytes) -> Cluster:
    doc = _load_json(text, "cluster")
    _check_fields(doc, {"bandwidth_mbps", "bytes_per_element", "devices"}, {"bandwidth_mbps", "devices"}, "cluster")
    devs = []
    for n, d in enumerate(doc["devices"]):
        _check_fields(d, {"name", "flops", "alpha"}, {"name", "flops"}, f"cluster device {n}")
        try:
            devs.append(DeviceSpec(str(d["name"]), float(d["flops"]), float(d.get("alpha", 1.0))))
        except (TypeError, ValueError) as e:
            raise FileFormatError(f"cluster device {n}: {e}") from None
    try:
        return Cluster(devs, float(doc["bandwidth_mbps"]) * MBPS, int(doc.get("bytes_per_element", 4)))
    except (TypeError, ValueError) as e:
        raise FileFormatError(f"cluster: {e}") from None


def read_cluster(path: str | Path) -> Cluster:
    return parse_cluster(Path(path).read_bytes())


def cluster_to_dict(c: Cluster) -> dict:
    return {
        "bandwidth_mbps": fmt(c.bandwidth_bytes_per_s / MBPS),
        "bytes_per_element": c.bytes_per_element,
        "devices": [{"name": d.name, "flops": fmt(d.capacity_flops), "alpha": fmt(d.alpha)} for d in c.devices],
    }


# -- piece chains -------------------------------------------------------------


def pieces_to_dict(r: PartitionResult) -> dict:
    return {
        "model": r.graph.name,
        "max_diameter": r.max_diameter,
        "objective": r.objective,
        "pieces": [
            {"index": p.index, "layer_ids": p.layer_ids, "redundancy_flops": p.redundancy_flops}
            for p in r.pieces
        ],
        "memo_stats": dict(r.memo_stats),
        "graph": r.graph.to_dict(),
    }


def pieces_from_dict(doc: dict, g: ModelGraph | None = None) -> PartitionResult:
    _check_fields(
        doc, {"model", "max_diameter", "objective", "pieces", "memo_stats", "graph"},
        {"max_diameter", "pieces"}, "pieces",
    )
    if g is None:
        if "graph" not in doc:
            raise FileFormatError("pieces: no embedded graph; pass the model file")
        try:
            g = model_from_dict(doc["graph"])
        except ModelError as e:
            raise FileFormatError(f"pieces: embedded graph: {e}") from None
    out = []
    for n, p in enumerate(doc["pieces"]):
        _check_fields(p, {"index", "layer_ids", "redundancy_flops"}, {"layer_ids"}, f"piece {n}")
        ids = p["layer_ids"]
        if any(i not in g.layers for i in ids):
            raise FileFormatError(f"piece {n}: unknown layer id")
        vs = VertexSet.of(ids)
        ins, outs = _interfaces(vs.mask, g)
        out.append(Piece(n, vs, int(p.get("redundancy_flops", 0)), ins, outs))
    masks = [p.vertices.mask for p in out]
    union = 0
    for m in masks:
        if union & m:
            raise FileFormatError("pieces overlap")
        union |= m
    if union != g.all_mask or not chain_valid([p.vertices for p in out], g):
        raise FileFormatError("pieces do not form a chain covering the model")
    obj = max((p.redundancy_flops for p in out), default=0)
    return PartitionResult(g, tuple(out), obj, int(doc["max_diameter"]), dict(doc.get("memo_stats", {})))


def read_pieces(path: str | Path) -> PartitionResult:
    return pieces_from_dict(_load_json(Path(path).read_bytes(), "pieces"))


def write_pieces(r: PartitionResult, path: str | Path) -> None:
    Path(path).write_text(dumps(pieces_to_dict(r)))


# -- plans --------------------------------------------------------------------


def plan_to_dict(p: PipelinePlan, c: Cluster | None = None) -> dict:
    stages = []
    for s in p.stages:
        stages.append({
            "pieces": list(s.piece_range),
            "layer_ids": s.segment.ids(),
            "devices": list(s.device_names),
            "master": s.master,
            "strips": [
                {"device": n, "row_start": r.row_offset, "row_end": r.row_end}
                for n, r in zip(s.device_names, s.strips)
            ],
            "t_comp_s": fmt(s.cost.stage_compute_s),
            "t_comm_s": fmt(s.cost.stage_comm_s),
            "t_stage_s": fmt(s.cost.stage_total_s),
        })
    doc = {
        "model": p.graph.name if p.graph is not None else None,
        "cluster": cluster_to_dict(c) if c is not None else None,
        "t_lim_s": fmt(p.t_lim_s),
        "stages": stages,
        "period_s": fmt(p.predicted_period_s),
        "latency_s": fmt(p.predicted_latency_s),
    }
    if p.graph is not None:
        doc["graph"] = p.graph.to_dict()
    return doc


_PLAN_FIELDS = {"model", "cluster", "t_lim_s", "stages", "period_s", "latency_s", "graph",
                "explored_states", "gap"}
_STAGE_FIELDS = {"pieces", "layer_ids", "devices", "master", "strips", "t_comp_s", "t_comm_s", "t_stage_s"}


def plan_from_dict(doc: dict, c: Cluster | None = None, g: ModelGraph | None = None) -> PipelinePlan:
    """Rebuild a plan and re-score it on ``c`` (the embedded cluster when
    ``c`` is omitted)."""
    _check_fields(doc, _PLAN_FIELDS, {"stages"}, "plan")
    if g is None:
        if "graph" not in doc:
            raise FileFormatError("plan: no embedded graph")
        g = model_from_dict(doc["graph"])
    if c is None:
        if not doc.get("cluster"):
            raise FileFormatError("plan: no cluster given or embedded")
        c = parse_cluster(json.dumps(doc["cluster"]))
    stages = []
    for n, s in enumerate(doc["stages"]):
        _check_fields(s, _STAGE_FIELDS, {"pieces", "layer_ids", "devices", "strips"}, f"stage {n}")
        try:
            devs = [c.device(name) for name in s["devices"]]
        except KeyError as e:
            raise FileFormatError(f"stage {n}: device {e.args[0]!r} not in cluster") from None
        if s.get("master", s["devices"][0]) != s["devices"][0]:
            raise FileFormatError(f"stage {n}: master must be listed first")
        seg = VertexSet.of(s["layer_ids"])
        tab = segment_table(g, seg)
        strips = sorted(s["strips"], key=lambda r: s["devices"].index(r["device"]))
        bounds = [0]
        for r in strips:
            if r["row_start"] != bounds[-1]:
                raise FileFormatError(f"stage {n}: strips do not tile the output height")
            bounds.append(r["row_end"])
        try:
            bounds_from_strips(strips_from_bounds(bounds), tab.ref_height)
        except ValueError as e:
            raise FileFormatError(f"stage {n}: {e}") from None
        cost = stage_cost_bounds(tab, devs, bounds, c.bandwidth_bytes_per_s, c.bytes_per_element)
        stages.append(StageConfig(tuple(s["pieces"]), tuple(s["devices"]), tuple(strips_from_bounds(bounds)), cost, seg))
    t_lim = doc.get("t_lim_s")
    return make_plan(stages, math.inf if t_lim is None else float(t_lim), g)


def read_plan(path: str | Path, c: Cluster | None = None) -> PipelinePlan:
    return plan_from_dict(_load_json(Path(path).read_bytes(), "plan"), c)


def write_plan(p: PipelinePlan, path: str | Path, c: Cluster | None = None, extra: dict | None = None) -> None:
    doc = plan_to_dict(p, c)
    if extra:
        doc.update(extra)
    Path(path).write_text(dumps(doc))


# -- simulation reports -------------------------------------------------------


def report_to_dict(r: SimReport, model: str | None = None) -> dict:
    return {
        "model": model,
        "frames": r.frames,
        "warmup_frames": r.warmup_frames,
        "measured_period_s": fmt(r.measured_period_s),
        "measured_latency_s": fmt(r.measured_latency_s),
        "predicted_period_s": fmt(r.predicted_period_s),
        "predicted_latency_s": fmt(r.predicted_latency_s),
        "throughput_fpm": fmt(r.throughput_fpm),
        "devices": [
            {
                "device": name,
                "stage": d.stage,
                "utilization_pct": fmt(d.utilization_pct),
                "redundancy_pct": fmt(d.redundancy_pct),
                "model_bytes": d.mem_bytes_model,
                "feature_bytes": d.mem_bytes_feature,
                "busy_s": fmt(d.busy_s),
            }
            for name, d in r.per_device.items()
        ],
    }


def report_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for d in doc["devices"]:
        w.writerow([d[k] for k in CSV_FIELDS])
    return buf.getvalue()


def timeline_lines(r: SimReport) -> str:
    out = []
    for t, ev, k, dev, f in r.timeline or []:
        out.append(json.dumps({"time_s": fmt(t), "event": ev, "stage": k, "device": dev, "frame": f}))
    return "\n".join(out) + ("\n" if out else "")


def read_report(path: str | Path) -> dict:
    doc = _load_json(Path(path).read_bytes(), "report")
    if not isinstance(doc, dict) or "devices" not in doc:
        raise FileFormatError(f"{path}: not a simulation report")
    return doc


MERGED_FIELDS = ("run", "device", "stage", "utilization_pct", "redundancy_pct", "model_bytes",
                 "feature_bytes", "measured_period_s", "measured_latency_s", "throughput_fpm")


def merge_reports(named: list[tuple[str, dict]]) -> str:
    """One CSV row per (run, device). Repeated run names get ``#2``, ``#3``
    suffixes."""
    seen: dict[str, int] = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MERGED_FIELDS)
    for name, doc in named:
        seen[name] = seen.get(name, 0) + 1
        run = name if seen[name] == 1 else f"{name}#{seen[name]}"
        for d in doc["devices"]:
            w.writerow([run, d["device"], d["stage"], d["utilization_pct"], d["redundancy_pct"],
                        d["model_bytes"], d["feature_bytes"], doc.get("measured_period_s"),
                        doc.get("measured_latency_s"), doc.get("throughput_fpm")])
    return buf.getvalue()
