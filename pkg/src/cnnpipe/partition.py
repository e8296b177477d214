"""Split a CNN DAG into a chain of pieces minimizing the worst per-piece
redundancy.

The search peels ending pieces off the back of the graph. Once a piece is
removed, every remaining layer that feeds it must land in the next piece,
which keeps the result a chain. Because of that rule the set of forced
layers is a function of the residual graph alone, so the residual vertex
mask is an exact memo key.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

from .cost import Region, piece_redundancy
from .graph import (
    ModelGraph,
    VertexSet,
    _bits,
    _ending_piece_masks,
    _popcount,
    boundary_forced,
    chain_valid,
)

__all__ = ["Piece", "PartitionResult", "partition", "partition_large", "PartitionError"]

DEFAULT_MAX_DIAMETER = 5


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Piece:
    index: int
    vertices: VertexSet
    redundancy_flops: int
    interface_in: tuple[tuple[int, Region], ...] = ()
    interface_out: tuple[tuple[int, Region], ...] = ()

    @property
    def layer_ids(self) -> list[int]:
        return self.vertices.ids()


@dataclass(frozen=True)
class PartitionResult:
    graph: ModelGraph
    pieces: tuple[Piece, ...]
    objective: int
    max_diameter: int
    memo_stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pieces)

    def segment(self, i: int, j: int) -> VertexSet:
        """Union of pieces ``i..j`` (0-based, inclusive)."""
        m = 0
        for p in self.pieces[i : j + 1]:
            m |= p.vertices.mask
        return VertexSet(m)


class _Search:
    def __init__(self, g: ModelGraph, universe: int, max_diameter: int):
        self.g = g
        self.universe = universe
        self.max_diameter = max_diameter
        self.memo: dict[int, tuple[int, int, int]] = {}
        self.cost: dict[int, int] = {}
        self.hits = 0
        self.candidates = 0
        self.need_weighted = bool(universe & g.weighted_mask)

    def redundancy(self, mask: int) -> int:
        c = self.cost.get(mask)
        if c is None:
            c = piece_redundancy(VertexSet(mask), self.g)
            self.cost[mask] = c
        return c

    def _valid(self, piece: int, rest: int) -> bool:
        # every piece must carry at least one conv/pool layer
        if not self.need_weighted:
            return True
        w = self.g.weighted_mask
        return bool(piece & w) and (rest == 0 or bool(rest & w))

    def solve(self, residual: int) -> tuple[int, int]:
        """(objective, piece count) of the best chain covering ``residual``."""
        if residual == 0:
            return 0, 0
        hit = self.memo.get(residual)
        if hit is not None:
            self.hits += 1
            return hit[0], hit[1]
        forced = boundary_forced(residual, self.g, self.universe)
        best: tuple[int, int, int] | None = None
        for me in _ending_piece_masks(residual, self.g, forced, self.max_diameter):
            rest = residual & ~me
            if not self._valid(me, rest):
                continue
            self.candidates += 1
            sub_obj, sub_n = self.solve(rest)
            obj = max(sub_obj, self.redundancy(me))
            n = sub_n + 1
            # candidates arrive in canonical order, so the first one wins ties
            if best is None or (obj, -n) < (best[0], -best[1]):
                best = (obj, n, me)
        assert best is not None  # the whole residual is always a candidate
        self.memo[residual] = best
        return best[0], best[1]

    def chain(self) -> list[int]:
        out = []
        r = self.universe
        while r:
            me = self.memo[r][2]
            out.append(me)
            r &= ~me
        out.reverse()
        return out

    def stats(self) -> dict:
        return {"states": len(self.memo), "hits": self.hits, "candidates": self.candidates}


def _interfaces(mask: int, g: ModelGraph):
    ins, outs = {}, {}
    for v in _bits(mask):
        for p in g.pred(v):
            if not mask >> p & 1 and p not in ins:
                c, h, w = g.shapes[p]
                ins[p] = Region(c, h, w, 0)
        succ = g.succ(v)
        if not succ or any(not mask >> u & 1 for u in succ):
            c, h, w = g.shapes[v]
            outs[v] = Region(c, h, w, 0)
    return tuple(sorted(ins.items())), tuple(sorted(outs.items()))


def _build(g: ModelGraph, masks: list[int], max_diameter: int, stats: dict) -> PartitionResult:
    pieces = []
    for n, m in enumerate(masks):
        ins, outs = _interfaces(m, g)
        pieces.append(Piece(n, VertexSet(m), piece_redundancy(VertexSet(m), g), ins, outs))
    if not chain_valid([p.vertices for p in pieces], g):
        raise PartitionError("internal error: pieces do not form a chain")
    objective = max((p.redundancy_flops for p in pieces), default=0)
    return PartitionResult(g, tuple(pieces), objective, max_diameter, stats)


def _ensure_recursion(n: int) -> None:
    need = 4 * n + 200
    if sys.getrecursionlimit() < need:
        sys.setrecursionlimit(need)


def partition(
    g: ModelGraph, max_diameter: int = DEFAULT_MAX_DIAMETER, within: VertexSet | None = None
) -> PartitionResult:
    """Optimal piece chain under the diameter bound.

    Ties on the objective prefer more pieces, then the canonically smallest
    ending piece. ``within`` restricts the search to a successor-closed part
    of the graph; the result then covers only that part.
    """
    universe = g.all_mask if within is None else within.mask
    if within is not None and any(g.succ_mask[v] & ~universe for v in _bits(universe)):
        raise PartitionError("within must be closed under successors")
    _ensure_recursion(len(g.layers))
    search = _Search(g, universe, max_diameter)
    search.solve(universe)
    masks = search.chain()
    if within is None:
        return _build(g, masks, max_diameter, search.stats())
    pieces = []
    for n, m in enumerate(masks):
        ins, outs = _interfaces(m, g)
        pieces.append(Piece(n, VertexSet(m), search.redundancy(m), ins, outs))
    objective = max((p.redundancy_flops for p in pieces), default=0)
    return PartitionResult(g, tuple(pieces), objective, max_diameter, search.stats())


def partition_large(
    g: ModelGraph,
    chunk_layers: int,
    margin_layers: int,
    max_diameter: int = DEFAULT_MAX_DIAMETER,
) -> PartitionResult:
    """Divide-and-conquer partition for graphs too wide to search whole.

    A topological prefix of ``chunk_layers`` layers is partitioned on its own;
    the leading pieces that stay at least ``margin_layers`` hops away from the
    cut are committed and the rest of the graph is processed the same way.
    """
    if chunk_layers <= 2 * margin_layers:
        raise PartitionError("chunk_layers must exceed twice margin_layers")
    _ensure_recursion(chunk_layers)
    remaining = g.all_mask
    committed: list[int] = []
    stats = {"states": 0, "hits": 0, "candidates": 0, "chunks": 0}
    dist = g.distances
    while remaining:
        order = [v for v in g.topo if remaining >> v & 1]
        final = len(order) <= chunk_layers
        prefix = remaining if final else sum(1 << v for v in order[:chunk_layers])
        search = _Search(g, prefix, max_diameter)
        search.solve(prefix)
        for k, v in search.stats().items():
            stats[k] += v
        stats["chunks"] += 1
        chain = search.chain()
        if final:
            committed.extend(chain)
            break
        outside = [v for v in order[chunk_layers:]]
        keep = []
        for piece in chain:
            far = all(
                min(dist[v].get(u, sys.maxsize) for u in outside) >= margin_layers
                for v in _bits(piece)
            )
            if not far:
                break
            keep.append(piece)
        # the remainder must still hold a conv/pool layer
        while keep and g.weighted_mask and not (remaining & ~sum(keep)) & g.weighted_mask:
            keep.pop()
        if not keep:
            raise PartitionError("chunk too small to retain any piece; raise chunk_layers")
        committed.extend(keep)
        for piece in keep:
            remaining &= ~piece
    return _build(g, committed, max_diameter, stats)


def piece_count(result: PartitionResult) -> int:
    return len(result.pieces)


def weighted_count(mask: int, g: ModelGraph) -> int:
    return _popcount(mask & g.weighted_mask)
