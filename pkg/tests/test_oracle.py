import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnpipe.cost import Cluster, DeviceSpec, equal_strips, segment_table, stage_cost, strips_from_bounds
from cnnpipe.oracle import (
    InstanceTooLarge,
    homogeneous_state_count,
    oracle_heterogeneous,
    oracle_homogeneous,
    period_ratio,
)
from cnnpipe.partition import partition
from cnnpipe.planner import StageCosts, plan, plan_homogeneous
from instances import conv, mixed_cluster, model, random_chain, uniform_cluster


def cluster(caps, bw=1e6):
    return Cluster([DeviceSpec(f"d{k}", c) for k, c in enumerate(caps)], bw)


def conv_chain(n, h=8, w=8, c=4, k=3):
    layers = [conv(i, k=k, c_in=c, c_out=c) for i in range(n)]
    return model(layers, [(i, i + 1) for i in range(n - 1)], c=c, h=h, w=w)


def closed_form(L, D):
    # S stages: choose S-1 cut points, and a composition of some used <= D devices into S parts
    return sum(math.comb(L - 1, S - 1) * sum(math.comb(u - 1, S - 1) for u in range(S, D + 1))
               for S in range(1, min(L, D) + 1))


def test_single_piece():
    pieces = partition(conv_chain(1, h=16))
    c = cluster([1e6] * 4)
    rep = oracle_homogeneous(pieces, c)
    ts = StageCosts(pieces, c)
    assert len(rep.best_plan.stages) == 1
    assert rep.best_plan.predicted_period_s == min(ts(0, 0, m) for m in range(1, 5))
    assert rep.explored_states == 4


def test_three_piece_example():
    layers = [conv(0, k=1, c_in=1, c_out=2), conv(1, k=1, c_in=2, c_out=2), conv(2, k=1, c_in=2, c_out=3)]
    g = model(layers, [(0, 1), (1, 2)], c=1, h=1, w=500)
    pieces = partition(g)
    rep = oracle_homogeneous(pieces, cluster([1000.0, 1000.0], bw=1e30))
    assert rep.best_plan.predicted_period_s == pytest.approx(3.0)
    assert [s.piece_range for s in rep.best_plan.stages] == [(0, 1), (2, 2)]
    assert rep.explored_states == closed_form(3, 2) == 4


@pytest.mark.parametrize("L,D", [(1, 1), (3, 2), (4, 4), (6, 3), (10, 8)])
def test_state_count_closed_form(L, D):
    assert homogeneous_state_count(L, D) == closed_form(L, D)
    assert closed_form(L, D) == sum(math.comb(L - 1, S - 1) * math.comb(D, S) for S in range(1, min(L, D) + 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 5), st.integers(0, 100_000))
def test_explored_matches_closed_form(n, d, seed):
    rng = random.Random(seed)
    pieces = partition(random_chain(rng, n, 16))
    rep = oracle_homogeneous(pieces, uniform_cluster(rng, d))
    assert rep.explored_states == closed_form(len(pieces.pieces), d)


def test_guard_rails():
    big = partition(conv_chain(11))
    with pytest.raises(InstanceTooLarge):
        oracle_homogeneous(big, cluster([1.0]))
    small = partition(conv_chain(2))
    with pytest.raises(InstanceTooLarge):
        oracle_homogeneous(small, cluster([1.0] * 9))
    with pytest.raises(InstanceTooLarge):
        oracle_heterogeneous(partition(conv_chain(9)), cluster([1.0, 2.0]))
    with pytest.raises(InstanceTooLarge):
        oracle_heterogeneous(small, cluster([1.0, 2.0] * 4))
    with pytest.raises(InstanceTooLarge):
        oracle_heterogeneous(partition(conv_chain(2, h=65)), cluster([1.0, 2.0]))


def test_infeasible_cap_gives_fallback():
    pieces = partition(conv_chain(3))
    c = cluster([1e6, 1e6])
    rep = oracle_homogeneous(pieces, c, t_lim=1e-9)
    assert rep.best_plan is None and not rep.feasible
    assert rep.fallback is not None and rep.fallback.predicted_latency_s > 1e-9
    het = oracle_heterogeneous(pieces, cluster([1e6, 2e6]), t_lim=1e-9)
    assert het.best_plan is None and het.fallback is not None


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 100_000))
def test_uniform_heterogeneous_equals_homogeneous(n, d, seed):
    rng = random.Random(seed)
    pieces = partition(random_chain(rng, n, 8))
    c = uniform_cluster(rng, d)
    homo = oracle_homogeneous(pieces, c).best_plan.predicted_period_s
    het = oracle_heterogeneous(pieces, c).best_plan.predicted_period_s
    # the strip search includes the equal split, so it can only do better
    assert het <= homo


@pytest.mark.parametrize("n,d", [(1, 2), (2, 2), (3, 3), (2, 4)])
def test_uniform_heterogeneous_equals_homogeneous_without_halo(n, d):
    pieces = partition(conv_chain(n, h=12, k=1))
    c = cluster([1e6] * d, bw=1e7)
    homo = oracle_homogeneous(pieces, c).best_plan.predicted_period_s
    assert oracle_heterogeneous(pieces, c).best_plan.predicted_period_s == homo


def brute_two_pieces(pieces, c):
    """Every device assignment, master order and split point for two pieces."""
    g = pieces.graph
    best = math.inf
    devs = c.devices

    def stage_time(i, j, group):
        seg = pieces.segment(i, j)
        H = segment_table(g, seg).ref_height
        out = math.inf
        for order in itertools.permutations(group):
            for cuts in itertools.combinations(range(1, H), len(order) - 1):
                bounds = [0, *cuts, H]
                cb = stage_cost(seg, list(order), strips_from_bounds(bounds), g, c.bandwidth_bytes_per_s)
                out = min(out, cb.stage_total_s)
        return out

    for labels in itertools.product((None, 0, 1), repeat=len(devs)):
        g0 = [d for d, l in zip(devs, labels) if l == 0]
        g1 = [d for d, l in zip(devs, labels) if l == 1]
        if g0 and not g1:
            best = min(best, stage_time(0, 1, g0))
        elif g0 and g1:
            best = min(best, max(stage_time(0, 0, g0), stage_time(1, 1, g1)))
    return best


def test_two_pieces_two_devices_by_hand():
    pieces = partition(conv_chain(2, h=6, k=1))
    assert len(pieces.pieces) == 2
    c = cluster([2e5, 1e5], bw=5e5)
    rep = oracle_heterogeneous(pieces, c)
    assert rep.best_plan.predicted_period_s == pytest.approx(brute_two_pieces(pieces, c), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([1, 3]))
def test_two_pieces_against_brute_force(seed, k):
    rng = random.Random(seed)
    pieces = partition(conv_chain(2, h=rng.choice((4, 6, 8)), k=k))
    c = Cluster([DeviceSpec(f"d{n}", rng.choice((1e5, 2e5, 3e5))) for n in range(rng.choice((2, 3)))],
                rng.choice((1e5, 1e6, 1e7)))
    rep = oracle_heterogeneous(pieces, c)
    assert rep.best_plan.predicted_period_s == pytest.approx(brute_two_pieces(pieces, c), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 100_000))
def test_heuristic_gap_at_least_one(n, d, seed):
    rng = random.Random(seed)
    pieces = partition(random_chain(rng, n, 16))
    c = mixed_cluster(rng, d)
    p = plan(pieces, c)
    rep = oracle_heterogeneous(pieces, c).compare(p)
    assert rep.gap_vs >= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 100_000))
def test_homogeneous_oracle_equals_dp(n, d, seed):
    rng = random.Random(seed)
    pieces = partition(random_chain(rng, n, 16))
    c = uniform_cluster(rng, d)
    rep = oracle_homogeneous(pieces, c).compare(plan_homogeneous(pieces, c))
    assert rep.gap_vs == 1.0


def test_best_plan_strips_tile():
    rng = random.Random(7)
    pieces = partition(random_chain(rng, 4, 16))
    c = mixed_cluster(rng, 4)
    for s in oracle_heterogeneous(pieces, c).best_plan.stages:
        H = segment_table(pieces.graph, s.segment).ref_height
        assert s.strips[0].row_offset == 0 and s.strips[-1].row_end == H
        assert all(a.row_end == b.row_offset for a, b in zip(s.strips, s.strips[1:]))


def test_period_ratio():
    assert period_ratio(3.0, 2.0) == 1.5
    assert period_ratio(0.0, 0.0) == 1.0
    assert period_ratio(1.0, 0.0) == math.inf
    assert equal_strips(6, 2) == [0, 3, 6]
