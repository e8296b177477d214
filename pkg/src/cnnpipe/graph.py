"""CNN graph representation: layers, validation, ordering, width, diameter and
ending-piece enumeration.

Vertex sets are plain bit masks keyed by layer id (bit ``i`` is layer ``i``).
Python integers widen on demand, so there is no fixed upper bound on layer ids.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping, Sequence

import networkx as nx

__all__ = [
    "ModelError",
    "LayerSpec",
    "ModelGraph",
    "VertexSet",
    "parse_model",
    "topological_order",
    "width",
    "diameter",
    "enumerate_ending_pieces",
    "is_ending_piece",
    "KINDS",
    "WEIGHTED_KINDS",
]

KINDS = ("conv", "pool", "add", "concat", "input", "output")
WEIGHTED_KINDS = ("conv", "pool")
CONNECTOR_KINDS = ("add", "concat", "input", "output")

INF = float("inf")


class ModelError(ValueError):
    """Raised for malformed or inconsistent model descriptions."""


def _popcount(mask: int) -> int:
    return bin(mask).count("1")


def _bits(mask: int) -> Iterator[int]:
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


@dataclass(frozen=True)
class VertexSet:
    """Immutable set of layer ids backed by an integer bit mask."""

    mask: int = 0

    @classmethod
    def of(cls, ids: Iterable[int]) -> "VertexSet":
        m = 0
        for i in ids:
            if i < 0:
                raise ValueError("layer ids are non-negative")
            m |= 1 << i
        return cls(m)

    def __iter__(self) -> Iterator[int]:
        return _bits(self.mask)

    def __len__(self) -> int:
        return _popcount(self.mask)

    def __bool__(self) -> bool:
        return self.mask != 0

    def __contains__(self, i: object) -> bool:
        return isinstance(i, int) and i >= 0 and bool(self.mask >> i & 1)

    def __or__(self, other: "VertexSet") -> "VertexSet":
        return VertexSet(self.mask | other.mask)

    def __and__(self, other: "VertexSet") -> "VertexSet":
        return VertexSet(self.mask & other.mask)

    def __sub__(self, other: "VertexSet") -> "VertexSet":
        return VertexSet(self.mask & ~other.mask)

    def issubset(self, other: "VertexSet") -> bool:
        return self.mask & ~other.mask == 0

    def ids(self) -> list[int]:
        return list(_bits(self.mask))

    def key(self) -> tuple[int, tuple[int, ...]]:
        """Canonical ordering key: size first, then sorted ids."""
        return (len(self), tuple(self.ids()))

    def __repr__(self) -> str:
        return f"VertexSet({self.ids()})"


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: str
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: tuple[int, int] | None = None
    in_channels: int | None = None
    out_channels: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.id, int) or self.id < 0:
            raise ModelError(f"layer id must be a non-negative integer, got {self.id!r}")
        if self.kind not in KINDS:
            raise ModelError(f"layer {self.id}: unknown type {self.kind!r}")
        if self.kind in WEIGHTED_KINDS:
            for name in ("kernel", "stride", "padding"):
                v = getattr(self, name)
                if v is None:
                    raise ModelError(f"layer {self.id}: {self.kind} requires {name}")
                if len(v) != 2 or not all(isinstance(x, int) for x in v):
                    raise ModelError(f"layer {self.id}: {name} must be two integers")
            if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
                raise ModelError(f"layer {self.id}: kernel/stride must be >= 1, padding >= 0")
            if self.kind == "pool" and (
                self.stride[0] > self.kernel[0] or self.stride[1] > self.kernel[1]
            ):
                raise ModelError(f"layer {self.id}: pool stride exceeds kernel")
            if self.kind == "conv":
                for name in ("in_channels", "out_channels"):
                    v = getattr(self, name)
                    if not isinstance(v, int) or v < 1:
                        raise ModelError(f"layer {self.id}: conv requires positive {name}")
        else:
            if any(
                getattr(self, n) is not None
                for n in ("kernel", "stride", "padding", "in_channels", "out_channels")
            ):
                raise ModelError(f"layer {self.id}: {self.kind} layers take no kernel fields")

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    # Connectors behave like a 1x1, stride-1, unpadded window.
    @property
    def k(self) -> tuple[int, int]:
        return self.kernel or (1, 1)

    @property
    def s(self) -> tuple[int, int]:
        return self.stride or (1, 1)

    @property
    def p(self) -> tuple[int, int]:
        return self.padding or (0, 0)


@dataclass(frozen=True)
class ModelGraph:
    """Validated DAG of CNN layers.

    ``input_shape`` is ``(channels, height, width)`` of the frame fed to the
    single ``input`` layer.
    """

    name: str
    input_shape: tuple[int, int, int]
    layers: Mapping[int, LayerSpec]
    edges: tuple[tuple[int, int], ...]
    _succ: dict = field(init=False, repr=False, compare=False)
    _pred: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        layers = dict(sorted(self.layers.items()))
        object.__setattr__(self, "layers", layers)
        edges = tuple(sorted(set((int(a), int(b)) for a, b in self.edges)))
        object.__setattr__(self, "edges", edges)
        if not layers:
            raise ModelError("model has no layers")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelError("input shape must be three positive integers")
        for lid, layer in layers.items():
            if lid != layer.id:
                raise ModelError(f"layer key {lid} does not match id {layer.id}")
        succ: dict[int, list[int]] = {i: [] for i in layers}
        pred: dict[int, list[int]] = {i: [] for i in layers}
        for a, b in edges:
            if a not in layers or b not in layers:
                raise ModelError(f"edge [{a}, {b}] references a missing layer")
            if a == b:
                raise ModelError(f"cycle detected: self-loop on layer {a}")
            succ[a].append(b)
            pred[b].append(a)
        object.__setattr__(self, "_succ", {k: tuple(v) for k, v in succ.items()})
        object.__setattr__(self, "_pred", {k: tuple(v) for k, v in pred.items()})
        self._check_acyclic()
        self._check_structure()
        self.shapes  # noqa: B018  (forces shape validation)

    def _check_acyclic(self) -> None:
        if len(self.topo) != len(self.layers):
            raise ModelError("cycle detected in layer graph")

    def _check_structure(self) -> None:
        sources = [i for i in self.layers if not self._pred[i]]
        inputs = [i for i, l in self.layers.items() if l.kind == "input"]
        if len(inputs) > 1:
            raise ModelError(f"expected at most one input layer, found {len(inputs)}")
        if len(sources) != 1:
            raise ModelError(f"expected exactly one source layer, found {len(sources)}")
        if inputs and sources != inputs:
            raise ModelError("the input layer must be the only layer without predecessors")
        if self.layers[sources[0]].kind in ("add", "concat", "output"):
            raise ModelError(f"layer {sources[0]}: a {self.layers[sources[0]].kind} layer cannot be the source")
        if not any(not self._succ[i] for i in self.layers):
            raise ModelError("model has no sink layer")
        for i, layer in self.layers.items():
            if layer.kind in WEIGHTED_KINDS and len(self._pred[i]) > 1:
                raise ModelError(f"layer {i}: {layer.kind} needs exactly one input edge")
            if layer.kind == "output" and self._succ[i]:
                raise ModelError(f"layer {i}: output layer cannot have successors")

    # -- structure -------------------------------------------------------

    def succ(self, i: int) -> tuple[int, ...]:
        return self._succ[i]

    def pred(self, i: int) -> tuple[int, ...]:
        return self._pred[i]

    @cached_property
    def input_id(self) -> int:
        """The layer fed by the frame: the ``input`` layer, or the single
        source layer when the file declares none."""
        return next(i for i in self.layers if not self._pred[i])

    @cached_property
    def topo(self) -> tuple[int, ...]:
        indeg = {i: len(self._pred[i]) for i in self.layers}
        heap = [i for i, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        out = []
        while heap:
            v = heapq.heappop(heap)
            out.append(v)
            for w in self._succ[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    heapq.heappush(heap, w)
        return tuple(out)

    @cached_property
    def topo_index(self) -> dict[int, int]:
        return {v: n for n, v in enumerate(self.topo)}

    @cached_property
    def all_mask(self) -> int:
        m = 0
        for i in self.layers:
            m |= 1 << i
        return m

    @cached_property
    def succ_mask(self) -> dict[int, int]:
        return {i: VertexSet.of(self._succ[i]).mask for i in self.layers}

    @cached_property
    def pred_mask(self) -> dict[int, int]:
        return {i: VertexSet.of(self._pred[i]).mask for i in self.layers}

    @cached_property
    def weighted_mask(self) -> int:
        return VertexSet.of(i for i, l in self.layers.items() if l.is_weighted).mask

    @cached_property
    def segment_cache(self) -> dict:
        """Scratch space for per-segment tables built by the cost model."""
        return {}

    @cached_property
    def distances(self) -> dict[int, dict[int, int]]:
        """All-pairs hop distance on the undirected version of the graph."""
        und: dict[int, set[int]] = {i: set(self._succ[i]) | set(self._pred[i]) for i in self.layers}
        out = {}
        for s in self.layers:
            dist = {s: 0}
            q = deque([s])
            while q:
                u = q.popleft()
                for w in und[u]:
                    if w not in dist:
                        dist[w] = dist[u] + 1
                        q.append(w)
            out[s] = dist
        return out

    # -- shapes ----------------------------------------------------------

    @cached_property
    def shapes(self) -> dict[int, tuple[int, int, int]]:
        """Full output shape ``(C, H, W)`` of every layer on an unsplit frame."""
        shapes: dict[int, tuple[int, int, int]] = {}
        for i in self.topo:
            layer = self.layers[i]
            ins = [shapes[p] for p in self._pred[i]] or [tuple(self.input_shape)]
            if layer.kind == "input":
                shapes[i] = tuple(self.input_shape)
            elif layer.kind in WEIGHTED_KINDS:
                c, h, w = ins[0]
                if layer.kind == "conv" and c != layer.in_channels:
                    raise ModelError(
                        f"layer {i}: in_channels={layer.in_channels} but producer gives {c}"
                    )
                (kh, kw), (sh, sw), (ph, pw) = layer.k, layer.s, layer.p
                oh = (h + 2 * ph - kh) // sh + 1
                ow = (w + 2 * pw - kw) // sw + 1
                if oh < 1 or ow < 1:
                    raise ModelError(f"layer {i}: input {h}x{w} too small for kernel {kh}x{kw}")
                shapes[i] = (layer.out_channels if layer.kind == "conv" else c, oh, ow)
            else:
                spatial = {s[1:] for s in ins}
                if len(spatial) != 1:
                    raise ModelError(f"shape mismatch at connector {i}: {sorted(spatial)}")
                (h, w), = spatial
                if layer.kind == "add":
                    chans = {s[0] for s in ins}
                    if len(chans) != 1:
                        raise ModelError(f"channel mismatch at add connector {i}")
                    c = ins[0][0]
                else:
                    c = sum(s[0] for s in ins)
                shapes[i] = (c, h, w)
        return shapes

    def in_shape(self, i: int) -> tuple[int, int, int]:
        """Shape of the feature consumed by a single-input layer."""
        if self.layers[i].kind == "input" or not self._pred[i]:
            return tuple(self.input_shape)
        return self.shapes[self._pred[i][0]]

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        c, h, w = self.input_shape
        layers = []
        for layer in self.layers.values():
            d: dict = {"id": layer.id, "type": layer.kind}
            for name in ("kernel", "stride", "padding"):
                v = getattr(layer, name)
                if v is not None:
                    d[name] = list(v)
            for name in ("in_channels", "out_channels"):
                v = getattr(layer, name)
                if v is not None:
                    d[name] = v
            layers.append(d)
        return {
            "name": self.name,
            "input": {"channels": c, "height": h, "width": w},
            "layers": layers,
            "edges": [list(e) for e in self.edges],
        }


_LAYER_FIELDS = {"id", "type", "kernel", "stride", "padding", "in_channels", "out_channels"}
_TOP_FIELDS = {"name", "input", "layers", "edges"}


def _pair(layer_id, name, v):
    if v is None:
        return None
    if not isinstance(v, list) or len(v) != 2 or not all(type(x) is int for x in v):
        raise ModelError(f"layer {layer_id}: {name} must be a list of two integers")
    return (v[0], v[1])


def model_from_dict(doc: dict) -> ModelGraph:
    if not isinstance(doc, dict):
        raise ModelError("model file must contain a JSON object")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise ModelError(f"unknown top-level fields: {sorted(unknown)}")
    for name in _TOP_FIELDS:
        if name not in doc:
            raise ModelError(f"missing required field {name!r}")
    inp = doc["input"]
    if not isinstance(inp, dict) or set(inp) != {"channels", "height", "width"}:
        raise ModelError("'input' must have exactly channels, height, width")
    if not all(type(inp[k]) is int and inp[k] > 0 for k in inp):
        raise ModelError("'input' dimensions must be positive integers")
    layers: dict[int, LayerSpec] = {}
    for raw in doc["layers"]:
        if not isinstance(raw, dict):
            raise ModelError("each layer must be an object")
        unknown = set(raw) - _LAYER_FIELDS
        if unknown:
            raise ModelError(f"layer {raw.get('id')}: unknown fields {sorted(unknown)}")
        for name in ("id", "type"):
            if name not in raw:
                raise ModelError(f"layer is missing required field {name!r}")
        lid = raw["id"]
        if type(lid) is not int:
            raise ModelError(f"layer id must be an integer, got {lid!r}")
        if lid in layers:
            raise ModelError(f"duplicate layer id {lid}")
        layers[lid] = LayerSpec(
            id=lid,
            kind=raw["type"],
            kernel=_pair(lid, "kernel", raw.get("kernel")),
            stride=_pair(lid, "stride", raw.get("stride")),
            padding=_pair(lid, "padding", raw.get("padding")),
            in_channels=raw.get("in_channels"),
            out_channels=raw.get("out_channels"),
        )
    edges = []
    for e in doc["edges"]:
        if not isinstance(e, list) or len(e) != 2 or not all(type(x) is int for x in e):
            raise ModelError(f"edge must be a pair of integers, got {e!r}")
        edges.append((e[0], e[1]))
    return ModelGraph(
        name=str(doc["name"]),
        input_shape=(inp["channels"], inp["height"], inp["width"]),
        layers=layers,
        edges=tuple(edges),
    )


def parse_model(text: str | bytes) -> ModelGraph:
    """Parse and validate a JSON model description."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return model_from_dict(doc)


def topological_order(g: ModelGraph) -> list[int]:
    """Kahn order with ties broken by ascending id."""
    return list(g.topo)


def _reachability(g: ModelGraph) -> dict[int, int]:
    reach: dict[int, int] = {}
    for v in reversed(g.topo):
        m = 0
        for w in g.succ(v):
            m |= (1 << w) | reach[w]
        reach[v] = m
    return reach


def width(g: ModelGraph) -> int:
    """Maximum antichain among conv/pool layers under reachability.

    By Dilworth's theorem this equals the minimum number of chains covering
    the transitive closure, i.e. ``n - maximum bipartite matching``.
    """
    reach = _reachability(g)
    nodes = [i for i in g.topo if g.layers[i].is_weighted]
    if not nodes:
        return 0
    bip = nx.Graph()
    left = [("L", u) for u in nodes]
    bip.add_nodes_from(left, bipartite=0)
    bip.add_nodes_from((("R", u) for u in nodes), bipartite=1)
    for u in nodes:
        for v in nodes:
            if u != v and reach[u] >> v & 1:
                bip.add_edge(("L", u), ("R", v))
    matching = nx.bipartite.hopcroft_karp_matching(bip, top_nodes=left)
    matched = sum(1 for k in matching if k[0] == "L")
    return len(nodes) - matched


def _diameter_mask(mask: int, g: ModelGraph) -> float:
    ids = list(_bits(mask))
    dist = g.distances
    best = 0
    for n, u in enumerate(ids):
        du = dist[u]
        for v in ids[n + 1 :]:
            d = du.get(v)
            if d is None:
                return INF
            if d > best:
                best = d
    return best


def diameter(piece: VertexSet, g: ModelGraph) -> float:
    """Largest pairwise hop distance between members of ``piece``.

    Distances are measured on the undirected model graph, so members of
    parallel branches are related through their shared fork/join layers.
    """
    if not piece:
        raise ValueError("diameter of an empty piece")
    return _diameter_mask(piece.mask, g)


def is_ending_piece(piece: VertexSet, view: VertexSet, g: ModelGraph) -> bool:
    """True if every successor (inside ``view``) of a member is also a member."""
    if not piece or not piece.issubset(view):
        return False
    for u in piece:
        if g.succ_mask[u] & view.mask & ~piece.mask:
            return False
    return True


def _ending_piece_masks(view: int, g: ModelGraph, forced: int, max_diameter: float) -> list[int]:
    succ = g.succ_mask
    dist = g.distances
    # smallest successor-closed set containing the forced vertices
    closed = forced
    stack = list(_bits(forced))
    while stack:
        u = stack.pop()
        new = succ[u] & view & ~closed
        if new:
            closed |= new
            stack.extend(_bits(new))
    found: set[int] = set()
    base_d = _diameter_mask(closed, g) if closed else 0
    if base_d <= max_diameter:
        order = [v for v in reversed(g.topo) if view >> v & 1 and not closed >> v & 1]
        n = len(order)

        def rec(idx: int, cur: int, cur_d: float) -> None:
            if idx == n:
                if cur:
                    found.add(cur)
                return
            v = order[idx]
            rec(idx + 1, cur, cur_d)
            if succ[v] & view & ~cur:
                return
            dv = dist[v]
            d = cur_d
            for u in _bits(cur):
                duv = dv.get(u, INF)
                if duv > d:
                    d = duv
                    if d > max_diameter:
                        return
            rec(idx + 1, cur | (1 << v), d)

        rec(0, closed, base_d)
    found.add(view)
    return sorted(found, key=lambda m: (_popcount(m), list(_bits(m))))


def enumerate_ending_pieces(
    g_view: VertexSet,
    g: ModelGraph,
    forced: VertexSet = VertexSet(),
    max_diameter: int = 5,
) -> list[VertexSet]:
    """All ending pieces of ``g_view`` that contain ``forced`` and respect the
    diameter bound, in canonical order. ``g_view`` itself is always included."""
    if not forced.issubset(g_view):
        raise ValueError("forced vertices must lie inside the view")
    if not g_view:
        return []
    return [VertexSet(m) for m in _ending_piece_masks(g_view.mask, g, forced.mask, max_diameter)]


def boundary_forced(view: int, g: ModelGraph, universe: int | None = None) -> int:
    """Vertices of ``view`` with a direct edge into ``universe - view``."""
    if universe is None:
        universe = g.all_mask
    outside = universe & ~view
    m = 0
    for v in _bits(view):
        if g.succ_mask[v] & outside:
            m |= 1 << v
    return m


def chain_valid(pieces: Sequence[VertexSet], g: ModelGraph) -> bool:
    """Disjoint cover of all layers with every edge pointing forward."""
    owner: dict[int, int] = {}
    for n, p in enumerate(pieces):
        for v in p:
            if v in owner:
                return False
            owner[v] = n
    if set(owner) != set(g.layers):
        return False
    return all(owner[a] <= owner[b] for a, b in g.edges)
