import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnpipe.cost import MBPS, Cluster, DeviceSpec
from cnnpipe.partition import partition
from cnnpipe.planner import plan, plan_from_ranges
from cnnpipe.simulator import SimConfig, SimError, estimate_memory, simulate
from instances import conv, mixed_cluster, model, random_chain, uniform_cluster


def cluster(caps, bw=1e30):
    return Cluster([DeviceSpec(f"d{k}", c) for k, c in enumerate(caps)], bw)


def one_by_one_chain(channels, h=1, w=500):
    layers = [conv(i, k=1, c_in=a, c_out=b) for i, (a, b) in enumerate(zip(channels, channels[1:]))]
    return model(layers, [(i, i + 1) for i in range(len(layers) - 1)], c=channels[0], h=h, w=w)


def random_case(seed, hetero=True):
    rng = random.Random(seed)
    pieces = partition(random_chain(rng, rng.randint(1, 7), 16))
    n = rng.randint(1, 5)
    c = mixed_cluster(rng, n) if hetero else uniform_cluster(rng, n)
    return plan(pieces, c), c


def test_config_validation():
    with pytest.raises(SimError):
        SimConfig(frames=0)
    with pytest.raises(SimError):
        SimConfig(queue_capacity=0)
    with pytest.raises(SimError):
        SimConfig(jitter_pct=-1)
    with pytest.raises(SimError):
        SimConfig(arrival="poisson")
    with pytest.raises(SimError):
        SimConfig(arrival=-1.0)


def test_plan_must_match_cluster():
    pieces = partition(one_by_one_chain([1, 2, 2], h=4))
    p = plan_from_ranges(pieces, cluster([1.0, 1.0]), [(0, 0, 1), (1, 1, 1)])
    with pytest.raises(SimError, match="unknown device"):
        simulate(p, Cluster([DeviceSpec("x", 1.0)], 1.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.booleans())
def test_zero_jitter_matches_prediction(seed, hetero):
    p, c = random_case(seed, hetero)
    r = simulate(p, c, SimConfig(frames=60))
    assert r.measured_period_s == pytest.approx(p.predicted_period_s, rel=1e-9)
    assert r.departures[0] - r.starts[0] == pytest.approx(p.predicted_latency_s, rel=1e-9)


def test_single_device_single_stage():
    pieces = partition(one_by_one_chain([2, 2], h=4))
    c = cluster([1000.0])
    p = plan(pieces, c)
    r = simulate(p, c, SimConfig(frames=10))
    t = p.stages[0].cost.t_comp_per_device["d0"]
    assert r.measured_latency_s == pytest.approx(t)
    assert r.per_device["d0"].utilization_pct == pytest.approx(100.0)


def test_two_stage_utilization():
    c = cluster([1000.0, 1000.0])
    p = plan_from_ranges(partition(one_by_one_chain([2, 2, 1])), c, [(0, 0, 1), (1, 1, 1)])
    assert [s.time_s for s in p.stages] == pytest.approx([2.0, 1.0])
    r = simulate(p, c, SimConfig(frames=100))
    assert r.measured_period_s == pytest.approx(2.0)
    assert r.per_device["d0"].utilization_pct == pytest.approx(100.0)
    assert r.per_device["d1"].utilization_pct == pytest.approx(50.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 40))
def test_pipeline_fill(seed, frames):
    p, c = random_case(seed)
    r = simulate(p, c, SimConfig(frames=frames))
    for n, d in enumerate(r.departures):
        assert d == pytest.approx(p.predicted_latency_s + n * p.predicted_period_s, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(0, 30), st.integers(1, 3))
def test_causality_and_flow(seed, jitter, qcap):
    p, c = random_case(seed)
    r = simulate(p, c, SimConfig(frames=25, jitter_pct=jitter, seed=seed, queue_capacity=qcap,
                                 record_timeline=True))
    times = [e[0] for e in r.timeline]
    assert times == sorted(times)
    done = {}
    starts = {}
    for t, ev, k, dev, f in r.timeline:
        if ev == "done":
            done[(k, f)] = t
        elif ev == "start":
            starts[(k, f)] = t
    S = len(p.stages)
    for f in range(25):
        for k in range(S):
            assert starts[(k, f)] <= done[(k, f)]
            if k:
                assert starts[(k, f)] >= done[(k - 1, f)]
    # every frame leaves exactly once, in order
    departs = [f for _, ev, _, _, f in r.timeline if ev == "depart"]
    assert departs == list(range(25))
    assert list(r.departures) == sorted(r.departures)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 30))
def test_work_conservation(seed, frames):
    p, c = random_case(seed)
    r = simulate(p, c, SimConfig(frames=frames))
    for s in p.stages:
        for n in s.device_names:
            assert r.per_device[n].busy_s == pytest.approx(frames * s.cost.t_comp_per_device[n], rel=1e-12)
            assert 0.0 <= r.per_device[n].utilization_pct <= 100.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.5, 40))
def test_jitter_is_seeded_and_bounded(seed, jitter):
    p, c = random_case(seed)
    cfg = SimConfig(frames=50, jitter_pct=jitter, seed=seed)
    a, b = simulate(p, c, cfg), simulate(p, c, cfg)
    assert a == b
    # symmetric noise can shrink the bottleneck by at most the jitter factor
    assert a.measured_period_s >= (1 - jitter / 100) * p.predicted_period_s * (1 - 1e-12)


def test_paced_arrivals():
    pieces = partition(one_by_one_chain([1, 4, 1]))
    c = cluster([1000.0, 1000.0])
    p = plan_from_ranges(pieces, c, [(0, 0, 1), (1, 1, 1)])
    r = simulate(p, c, SimConfig(frames=50, arrival=5.0))
    assert r.measured_period_s == pytest.approx(5.0)
    assert r.measured_latency_s == pytest.approx(p.predicted_latency_s)
    assert r.throughput_fpm == pytest.approx(12.0)


def test_single_frame():
    p, c = random_case(11)
    r = simulate(p, c, SimConfig(frames=1))
    assert r.warmup_frames == 0
    assert r.measured_latency_s == pytest.approx(p.predicted_latency_s)


# -- memory ---------------------------------------------------------------------


def test_model_bytes_single_conv():
    g = model([conv(0, k=3, c_in=64, c_out=64)], [], c=64, h=8, w=8)
    pieces = partition(g)
    c = cluster([1e9])
    p = plan(pieces, c)
    mem = estimate_memory(p.stages[0], g)
    assert mem["d0"][0] == 147_712


def test_model_bytes_zero_without_conv(fixtures):
    g = fixtures("vgg16")
    pieces = partition(g)
    c = cluster([1e9] * len(pieces.pieces))
    p = plan_from_ranges(pieces, c, [(i, i, 1) for i in range(len(pieces.pieces))])
    pools = [s for s in p.stages if all(g.layers[v].kind != "conv" for v in s.segment)]
    assert pools
    for s in pools:
        assert all(m == 0 for m, _ in estimate_memory(s, g).values())


def test_distribution_reduces_model_bytes(fixtures):
    g = fixtures("vgg16")
    pieces = partition(g)
    c = Cluster([DeviceSpec(f"d{k}", 1e9) for k in range(4)], 50 * MBPS)
    whole = plan_from_ranges(pieces, c, [(0, len(pieces.pieces) - 1, 1)])
    (single,) = estimate_memory(whole.stages[0], g).values()
    multi = plan(pieces, c)
    for s in multi.stages:
        for m, _ in estimate_memory(s, g).values():
            assert m <= single[0]


def test_feature_bytes_shrink_with_strips():
    g = model([conv(0), conv(1)], [(0, 1)], h=32, w=32)
    pieces = partition(g)
    one = plan_from_ranges(pieces, cluster([1.0]), [(0, 1, 1)])
    four = plan_from_ranges(pieces, cluster([1.0] * 4), [(0, 1, 4)])
    (f1,) = [f for _, f in estimate_memory(one.stages[0], g).values()]
    assert all(f < f1 for _, f in estimate_memory(four.stages[0], g).values())
