"""Command-line front end: partition, plan, oracle, simulate, report."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from . import io as fio
from .graph import ModelError
from .oracle import oracle_heterogeneous, oracle_homogeneous
from .partition import DEFAULT_MAX_DIAMETER, PartitionError, partition, partition_large
from .planner import InfeasibleError, PipelinePlan, PlanError, plan
from .simulator import SimConfig, SimError, simulate

log = logging.getLogger("cnnpipe")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("PICO_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.ERROR),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _t_lim(text: str) -> float:
    if text.lower() in ("inf", "infinity", "none"):
        return math.inf
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("t-lim must be positive")
    return v


def _arrival(text: str):
    if text == "saturated":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("arrival is 'saturated' or an interval in seconds") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _print_plan(p: PipelinePlan, stream=sys.stdout) -> None:
    print(f"period_s   {p.predicted_period_s:.9g}", file=stream)
    print(f"latency_s  {p.predicted_latency_s:.9g}", file=stream)
    print(f"{'stage':>5}  {'pieces':>9}  {'t_comp_s':>12}  {'t_comm_s':>12}  {'t_stage_s':>12}  devices (rows)", file=stream)
    for k, s in enumerate(p.stages):
        rows = ", ".join(f"{n}:{r.row_offset}-{r.row_end}" for n, r in zip(s.device_names, s.strips))
        rng = f"{s.piece_range[0]}-{s.piece_range[1]}"
        print(
            f"{k:>5}  {rng:>9}  {s.cost.stage_compute_s:>12.6g}  {s.cost.stage_comm_s:>12.6g}  "
            f"{s.cost.stage_total_s:>12.6g}  {rows}",
            file=stream,
        )


def cmd_partition(a) -> int:
    raw = Path(a.model).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and not doc.get("layers"):
        raise UsageError("model has no layers")
    g = fio.parse_model(raw)
    log.debug("model %s: %d layers", g.name, len(g.layers))
    t0 = time.perf_counter()
    if a.chunk_layers:
        r = partition_large(g, a.chunk_layers, a.margin_layers, a.max_diameter)
    else:
        r = partition(g, a.max_diameter)
    dt = time.perf_counter() - t0
    log.info("partitioned %s into %d pieces in %.3fs", g.name, len(r.pieces), dt)
    text = fio.dumps(fio.pieces_to_dict(r))
    _emit(text, a.output)
    info = sys.stdout if a.output else sys.stderr
    stats = " ".join(f"{k}={v}" for k, v in r.memo_stats.items())
    print(f"pieces {len(r.pieces)}  objective {r.objective}  {stats}  time_s {dt:.3f}", file=info)
    return EXIT_OK


def cmd_plan(a) -> int:
    pieces = fio.read_pieces(a.pieces)
    c = fio.read_cluster(a.cluster)
    log.debug("%d pieces, %d devices, t_lim=%g", len(pieces.pieces), len(c.devices), a.t_lim)
    try:
        p = plan(pieces, c, a.t_lim, a.select)
    except InfeasibleError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        if e.plan is not None:
            print("best-effort plan (lowest latency):", file=sys.stderr)
            _print_plan(e.plan, sys.stderr)
        return EXIT_DOMAIN
    log.info("plan: %d stages, period %.6gs", len(p.stages), p.predicted_period_s)
    _emit(fio.dumps(fio.plan_to_dict(p, c)), a.output)
    _print_plan(p, sys.stdout if a.output else sys.stderr)
    return EXIT_OK


def cmd_oracle(a) -> int:
    pieces = fio.read_pieces(a.pieces)
    c = fio.read_cluster(a.cluster)
    compare = fio.read_plan(a.compare, c) if a.compare else None
    fn = oracle_homogeneous if c.is_uniform else oracle_heterogeneous
    rep = fn(pieces, c, a.t_lim)
    log.info("oracle explored %d states in %.3fs", rep.explored_states, rep.wall_time_s)
    if compare is not None:
        rep = rep.compare(compare)
    info = sys.stdout if a.output else sys.stderr
    if rep.best_plan is None:
        print(f"infeasible: no configuration meets t_lim={a.t_lim:g}s (explored {rep.explored_states})", file=sys.stderr)
        return EXIT_DOMAIN
    extra = {"explored_states": rep.explored_states, "gap": fio.fmt(rep.gap_vs) if rep.gap_vs is not None else None}
    doc = fio.plan_to_dict(rep.best_plan, c)
    doc.update(extra)
    _emit(fio.dumps(doc), a.output)
    print(f"optimal_period_s {rep.best_plan.predicted_period_s:.9g}", file=info)
    print(f"explored_states  {rep.explored_states}", file=info)
    print(f"wall_time_s      {rep.wall_time_s:.3f}", file=info)
    if rep.gap_vs is not None:
        print(f"gap              {rep.gap_vs:.9g}", file=info)
    return EXIT_OK


def _report_paths(out: str) -> tuple[Path, Path]:
    p = Path(out)
    if p.suffix.lower() in (".json", ".csv"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".csv")


def cmd_simulate(a) -> int:
    c = fio.read_cluster(a.cluster)
    p = fio.read_plan(a.plan, c)
    cfg = SimConfig(
        frames=a.frames, arrival=a.arrival, jitter_pct=a.jitter, seed=a.seed,
        queue_capacity=a.queue_capacity, record_timeline=bool(a.events),
    )
    r = simulate(p, c, cfg)
    log.info("simulated %d frames", r.frames)
    doc = fio.report_to_dict(r, p.graph.name if p.graph else None)
    if a.output:
        jp, cp = _report_paths(a.output)
        jp.write_text(fio.dumps(doc))
        cp.write_text(fio.report_csv(doc))
    else:
        sys.stdout.write(fio.dumps(doc))
    if a.events:
        Path(a.events).write_text(fio.timeline_lines(r))
    info = sys.stdout if a.output else sys.stderr
    print(f"measured_period_s  {r.measured_period_s:.9g}  (predicted {r.predicted_period_s:.9g})", file=info)
    print(f"measured_latency_s {r.measured_latency_s:.9g}  (predicted {r.predicted_latency_s:.9g})", file=info)
    print(f"throughput_fpm     {r.throughput_fpm:.9g}", file=info)
    return EXIT_OK


def cmd_report(a) -> int:
    named = [(Path(path).stem, fio.read_report(path)) for path in a.reports]
    _emit(fio.merge_reports(named), a.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cnnpipe", description="Pipeline planning for CNN inference on device clusters.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("partition", help="split a model into a chain of pieces")
    sp.add_argument("model")
    sp.add_argument("--max-diameter", type=int, default=DEFAULT_MAX_DIAMETER)
    sp.add_argument("--chunk-layers", type=int, default=0, help="use divide and conquer with this chunk size")
    sp.add_argument("--margin-layers", type=int, default=2)
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_partition)

    sp = sub.add_parser("plan", help="build a pipeline plan")
    sp.add_argument("pieces")
    sp.add_argument("cluster")
    sp.add_argument("--t-lim", type=_t_lim, default=math.inf)
    sp.add_argument("--select", choices=("max", "min"), default="max")
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_plan)

    sp = sub.add_parser("oracle", help="exhaustive search on small instances")
    sp.add_argument("pieces")
    sp.add_argument("cluster")
    sp.add_argument("--t-lim", type=_t_lim, default=math.inf)
    sp.add_argument("--compare", help="plan file to measure the gap against")
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_oracle)

    sp = sub.add_parser("simulate", help="replay a plan over a frame stream")
    sp.add_argument("plan")
    sp.add_argument("cluster")
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--jitter", type=float, default=0.0, help="percent")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--arrival", type=_arrival, default="saturated")
    sp.add_argument("--queue-capacity", type=int, default=1)
    sp.add_argument("--events", help="write the event log here (JSON lines)")
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("report", help="merge simulation reports into one CSV")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    try:
        return a.fn(a)
    except (UsageError, FileNotFoundError, IsADirectoryError) as e:
        print(f"cnnpipe: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, fio.FileFormatError, PlanError, PartitionError, SimError, ValueError) as e:
        print(f"cnnpipe: {e}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
