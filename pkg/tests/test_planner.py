import logging
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnpipe.cost import MBPS, Cluster, DeviceSpec, compute_time, evaluate_segment, segment_table
from cnnpipe.graph import VertexSet
from cnnpipe.oracle import oracle_homogeneous
from cnnpipe.partition import PartitionResult, partition
from cnnpipe.planner import (
    InfeasibleError,
    PlanError,
    StageCosts,
    adapt_heterogeneous,
    averaged_cluster,
    balance_strips,
    plan,
    plan_from_ranges,
    plan_homogeneous,
)
from instances import conv, mixed_cluster, model, random_chain, uniform_cluster

FAST_NET = 1e30


def cluster(caps, bw=FAST_NET):
    return Cluster([DeviceSpec(f"d{k}", c) for k, c in enumerate(caps)], bw)


def one_by_one_chain(channels, h=1, w=500):
    """Chain of 1x1 convs without an input layer; FLOPs are c_in*c_out*h*w."""
    layers = [conv(i, k=1, c_in=a, c_out=b) for i, (a, b) in enumerate(zip(channels, channels[1:]))]
    return model(layers, [(i, i + 1) for i in range(len(layers) - 1)], c=channels[0], h=h, w=w)


def check_plan(p, pieces, c):
    ranges = [s.piece_range for s in p.stages]
    assert ranges[0][0] == 0 and ranges[-1][1] == len(pieces.pieces) - 1
    assert all(a[1] + 1 == b[0] for a, b in zip(ranges, ranges[1:]))
    names = p.devices_used
    assert len(names) == len(set(names)) and set(names) <= {d.name for d in c.devices}
    for s in p.stages:
        tab = segment_table(pieces.graph, s.segment)
        assert s.strips[0].row_offset == 0 and s.strips[-1].row_end == tab.ref_height
        assert all(a.row_end == b.row_offset for a, b in zip(s.strips, s.strips[1:]))
        assert all(r.height_rows >= 1 for r in s.strips)
    assert p.predicted_period_s == max(s.time_s for s in p.stages)
    assert p.predicted_latency_s == pytest.approx(sum(s.time_s for s in p.stages), rel=1e-12)


# -- averaged cluster -----------------------------------------------------------


def test_averaged_cluster():
    a = averaged_cluster(cluster([2, 4], bw=7.0))
    assert [d.capacity_flops for d in a.devices] == [3, 3]
    assert a.bandwidth_bytes_per_s == 7.0 and a.is_uniform
    assert [d.capacity_flops for d in averaged_cluster(cluster([5])).devices] == [5]
    assert [d.capacity_flops for d in averaged_cluster(cluster([1, 1, 1])).devices] == [1, 1, 1]
    mixed = Cluster([DeviceSpec("a", 1, 1.0), DeviceSpec("b", 1, 3.0)], 1.0)
    assert [d.alpha for d in averaged_cluster(mixed).devices] == [2.0, 2.0]


# -- homogeneous DP -------------------------------------------------------------


def test_single_piece_single_device():
    g = one_by_one_chain([1, 2], h=4)
    pieces = partition(g)
    c = cluster([1000.0], bw=1e6)
    p = plan_homogeneous(pieces, c)
    assert len(p.stages) == 1
    assert p.predicted_period_s == p.predicted_latency_s == StageCosts(pieces, c)(0, 0, 1)


def test_three_pieces_two_devices():
    g = one_by_one_chain([1, 2, 2, 3])
    pieces = partition(g)
    assert len(pieces.pieces) == 3
    c = cluster([1000.0, 1000.0])
    ts = StageCosts(pieces, c)
    assert [ts(i, i, 1) for i in range(3)] == pytest.approx([1.0, 2.0, 3.0])
    p = plan_homogeneous(pieces, c)
    assert [s.piece_range for s in p.stages] == [(0, 1), (2, 2)]
    assert p.predicted_period_s == pytest.approx(3.0)
    best = oracle_homogeneous(pieces, c).best_plan
    assert p.predicted_period_s == best.predicted_period_s


def test_infeasible_reports_lowest_latency_plan():
    g = one_by_one_chain([1, 2, 2, 3])
    pieces = partition(g)
    c = cluster([1000.0, 1000.0])
    with pytest.raises(InfeasibleError) as e:
        plan_homogeneous(pieces, c, t_lim=5.0)
    fb = e.value.plan
    assert fb is not None and fb.predicted_latency_s == pytest.approx(6.0)
    with pytest.raises(InfeasibleError):
        plan(pieces, cluster([1000.0, 3000.0]), t_lim=0.5)


def test_empty_piece_chain_rejected(fixtures):
    g = fixtures("fig8")
    empty = PartitionResult(g, (), 0, 5)
    with pytest.raises(PlanError):
        plan(empty, cluster([1.0]))
    with pytest.raises(PlanError):
        plan_homogeneous(empty, cluster([1.0]))


def test_homogeneous_needs_uniform_cluster():
    pieces = partition(one_by_one_chain([1, 2, 2]))
    with pytest.raises(PlanError):
        plan_homogeneous(pieces, cluster([1.0, 2.0]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 100_000))
def test_dp_matches_oracle(n_layers, n_dev, seed):
    rng = random.Random(seed)
    g = random_chain(rng, n_layers, rng.choice((8, 16, 32)))
    pieces = partition(g)
    c = uniform_cluster(rng, n_dev)
    p = plan_homogeneous(pieces, c)
    o = oracle_homogeneous(pieces, c)
    assert p.predicted_period_s == o.best_plan.predicted_period_s
    check_plan(p, pieces, c)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 5), st.integers(0, 100_000), st.floats(1.0, 2.0))
def test_dp_matches_oracle_under_cap(n_layers, n_dev, seed, slack):
    rng = random.Random(seed)
    g = random_chain(rng, n_layers, 16)
    pieces = partition(g)
    c = uniform_cluster(rng, n_dev)
    free = plan_homogeneous(pieces, c)
    t_lim = free.predicted_latency_s * slack * 0.7
    o = oracle_homogeneous(pieces, c, t_lim)
    try:
        p = plan_homogeneous(pieces, c, t_lim)
    except InfeasibleError:
        assert o.best_plan is None
        return
    assert p.predicted_latency_s <= t_lim
    assert p.predicted_period_s == o.best_plan.predicted_period_s


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 100_000))
def test_single_stage_dominance_and_monotone_devices(n_layers, n_dev, seed):
    rng = random.Random(seed)
    g = random_chain(rng, n_layers, 16)
    pieces = partition(g)
    c = uniform_cluster(rng, n_dev + 1)
    small = Cluster(c.devices[:n_dev], c.bandwidth_bytes_per_s)
    p = plan_homogeneous(pieces, small)
    ts = StageCosts(pieces, small)
    L = len(pieces.pieces)
    assert p.predicted_period_s <= min(ts(0, L - 1, m) for m in range(1, n_dev + 1))
    assert plan_homogeneous(pieces, c).predicted_period_s <= p.predicted_period_s


def test_plan_from_ranges_validation():
    pieces = partition(one_by_one_chain([1, 2, 2, 3], h=4))
    c = cluster([1.0] * 3)
    with pytest.raises(PlanError):
        plan_from_ranges(pieces, c, [(0, 1, 2), (2, 2, 2)])
    with pytest.raises(PlanError):
        plan_from_ranges(pieces, c, [(0, 0, 1), (2, 2, 1)])
    with pytest.raises(PlanError):
        plan_from_ranges(pieces, c, [(0, 1, 1)])
    p = plan_from_ranges(pieces, c, [(0, 1, 2), (2, 2, 1)])
    check_plan(p, pieces, c)


# -- heterogeneous adaptation ---------------------------------------------------


def test_uniform_cluster_plan_is_homogeneous_plan(fixtures):
    pieces = partition(fixtures("vgg16"))
    c = cluster([1e9] * 4, bw=50 * MBPS)
    p = plan(pieces, c)
    h = plan_homogeneous(pieces, c)
    assert p == h
    a = adapt_heterogeneous(h, c)
    assert [s.piece_range for s in a.stages] == [s.piece_range for s in h.stages]
    assert [s.strips for s in a.stages] == [s.strips for s in h.stages]
    assert a.predicted_period_s == h.predicted_period_s


def test_fast_devices_split_across_equal_stages():
    g = one_by_one_chain([4, 4, 4], h=8, w=8)
    pieces = partition(g)
    assert len(pieces.pieces) == 2
    h = plan_from_ranges(pieces, averaged_cluster(cluster([4, 4, 1, 1])), [(0, 0, 2), (1, 1, 2)])
    c = cluster([4e9, 4e9, 1e9, 1e9], bw=100 * MBPS)
    a = adapt_heterogeneous(h, c)
    caps = [sorted(c.device(n).capacity_flops for n in s.device_names) for s in a.stages]
    assert caps == [[1e9, 4e9], [1e9, 4e9]]
    check_plan(a, pieces, c)
    # the fast device is the master of each stage
    assert all(c.device(s.master).capacity_flops == 4e9 for s in a.stages)


def test_select_min_is_valid():
    rng = random.Random(3)
    g = random_chain(rng, 6, 32)
    pieces = partition(g)
    c = mixed_cluster(rng, 5)
    for select in ("max", "min"):
        check_plan(plan(pieces, c, select=select), pieces, c)
    with pytest.raises(PlanError):
        plan(pieces, c, select="median")


def test_three_to_one_strips():
    g = one_by_one_chain([4, 4], h=16, w=16)
    pieces = partition(g)
    h = plan_from_ranges(pieces, averaged_cluster(cluster([3, 1])), [(0, 0, 2)])
    c = cluster([1e9, 3e9], bw=100 * MBPS)
    a = adapt_heterogeneous(h, c)
    (s,) = a.stages
    assert s.master == "d1"
    assert [r.height_rows for r in s.strips] == [12, 4]


def test_adapt_needs_enough_devices():
    pieces = partition(one_by_one_chain([1, 2, 2], h=4))
    h = plan_from_ranges(pieces, cluster([1.0] * 3), [(0, 0, 2), (1, 1, 1)])
    with pytest.raises(PlanError):
        adapt_heterogeneous(h, cluster([1.0, 2.0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 6), st.integers(0, 100_000))
def test_heterogeneous_plans_are_valid(n_layers, n_dev, seed):
    rng = random.Random(seed)
    g = random_chain(rng, n_layers, 16)
    pieces = partition(g)
    c = mixed_cluster(rng, n_dev)
    p = plan(pieces, c)
    check_plan(p, pieces, c)
    tight = p.predicted_latency_s * 0.999
    try:
        q = plan(pieces, c, tight)
    except InfeasibleError:
        return
    assert q.predicted_latency_s <= tight


# -- strip balancing ------------------------------------------------------------


def conv_table(k, h, w=8, c=4):
    g = model([conv(0, k=k, c_in=c, c_out=c)], [], c=c, h=h, w=w)
    return segment_table(g, VertexSet(g.all_mask))


def test_balance_equal_devices():
    devs, bounds = balance_strips(conv_table(3, 12), [DeviceSpec(n, 1e9) for n in "abc"])
    assert bounds == [0, 4, 8, 12]


def test_balance_two_to_one_no_halo():
    devs, bounds = balance_strips(conv_table(1, 9), [DeviceSpec("a", 2.0), DeviceSpec("b", 1.0)])
    assert [b - a for a, b in zip(bounds, bounds[1:])] == [6, 3]


def test_balance_three_to_one_matches_exhaustive():
    tab = conv_table(3, 8)
    devs = [DeviceSpec("a", 3.0), DeviceSpec("b", 1.0)]

    def worst(b):
        ev = evaluate_segment(tab, b)
        return max(compute_time(d, int(f)) for d, f in zip(devs, ev.flops))

    best = min(worst([0, k, 8]) for k in range(1, 8))
    _, bounds = balance_strips(tab, devs)
    assert worst(bounds) == best


def test_balance_drops_excess_devices(caplog):
    devs = [DeviceSpec(f"d{k}", float(k + 1)) for k in range(5)]
    with caplog.at_level(logging.WARNING):
        kept, bounds = balance_strips(conv_table(3, 3), devs)
    assert [d.name for d in kept] == ["d4", "d3", "d2"]
    assert bounds == [0, 1, 2, 3]
    assert "dropping" in caplog.text


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([0.5, 1.0, 2.0, 3.0]), min_size=1, max_size=4), st.integers(4, 24),
       st.sampled_from([1, 3, 5]))
def test_balance_conserves_rows(caps, h, k):
    tab = conv_table(k, h)
    devs = [DeviceSpec(f"d{n}", c) for n, c in enumerate(caps)]
    kept, bounds = balance_strips(tab, devs)
    assert bounds[0] == 0 and bounds[-1] == h
    assert all(b > a for a, b in zip(bounds, bounds[1:]))
    assert len(bounds) == len(kept) + 1
    ev = evaluate_segment(tab, bounds)
    assert math.isfinite(max(compute_time(d, int(f)) for d, f in zip(kept, ev.flops)))
