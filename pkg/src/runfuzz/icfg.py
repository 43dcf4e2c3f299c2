"""Program graphs, target resolution, and block-to-target distances.

The graph is an interprocedural CFG over named basic blocks.  Edges are
either control-flow edges or call edges; the distinction drives the edge
weight used for shortest-path distances: a control-flow edge out of a
block with ``d`` control-flow successors costs ``log2(d)``, a call edge
costs nothing.  Distances to each target are computed with one Dijkstra
pass per target over the transposed graph.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

CONTROL_FLOW = "cf"
CALL = "call"
EDGE_KINDS = (CONTROL_FLOW, CALL)


class TargetResolutionError(ValueError):
    """A target location resolves to no basic block."""


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str


class Icfg:
    """Immutable block/edge graph. Built once, then read-only."""

    def __init__(self, blocks, edges, entry):
        self.blocks = list(blocks)
        self.block_set = frozenset(self.blocks)
        if len(self.block_set) != len(self.blocks):
            raise ValueError("duplicate block names in graph")
        if entry not in self.block_set:
            raise ValueError(f"entry block {entry!r} is not declared")
        self.entry = entry
        self.edges = []
        self.cf_succ = {b: [] for b in self.blocks}
        self.call_succ = {b: [] for b in self.blocks}
        # predecessors as (src, kind) pairs, used by distance and critical
        # block computations
        self.preds = {b: [] for b in self.blocks}
        for e in edges:
            if not isinstance(e, Edge):
                e = Edge(*e)
            if e.kind not in EDGE_KINDS:
                raise ValueError(f"unknown edge kind {e.kind!r} on {e.src}->{e.dst}")
            if e.src not in self.block_set or e.dst not in self.block_set:
                raise ValueError(f"edge {e.src}->{e.dst} references undeclared block")
            self.edges.append(e)
            if e.kind == CONTROL_FLOW:
                self.cf_succ[e.src].append(e.dst)
            else:
                self.call_succ[e.src].append(e.dst)
            self.preds[e.dst].append((e.src, e.kind))

    def cf_out_degree(self, block: str) -> int:
        return len(self.cf_succ[block])

    def successors(self, block: str):
        """All successors regardless of edge kind."""
        return self.cf_succ[block] + self.call_succ[block]


def compute_edge_weight(src: str, kind: str, icfg: Icfg) -> float:
    """Weight of one outgoing edge of ``src``.

    Call edges are free; control-flow edges cost log2 of the number of
    control-flow successors of ``src``, so unconditional jumps are free
    and wide branches are expensive.
    """
    if kind == CALL:
        return 0.0
    return math.log2(icfg.cf_out_degree(src))


class DistanceTable:
    """Map (block, target) -> shortest-path weight.  Missing = unreachable."""

    def __init__(self):
        self._dist: dict[tuple[str, str], float] = {}

    def set(self, block: str, target: str, value: float) -> None:
        self._dist[(block, target)] = value

    def get(self, block: str, target: str, default=None):
        return self._dist.get((block, target), default)

    def __contains__(self, key) -> bool:
        return key in self._dist

    def items(self):
        return self._dist.items()

    def __len__(self) -> int:
        return len(self._dist)


def compute_distances(icfg: Icfg, targets) -> DistanceTable:
    """Shortest-path distance from every block to every target.

    Runs Dijkstra once per target on the transposed graph; the weight of a
    reversed edge is the weight of the original edge, which depends only on
    the original source block.
    """
    table = DistanceTable()
    # reverse adjacency with original edge weights, built once
    radj: dict[str, list[tuple[str, float]]] = {b: [] for b in icfg.blocks}
    for e in icfg.edges:
        radj[e.dst].append((e.src, compute_edge_weight(e.src, e.kind, icfg)))
    for t in sorted(targets):
        if t not in icfg.block_set:
            raise ValueError(f"target block {t!r} is not declared")
        dist = {t: 0.0}
        heap = [(0.0, t)]
        done = set()
        while heap:
            d, v = heapq.heappop(heap)
            if v in done:
                continue
            done.add(v)
            table.set(v, t, d)
            for u, w in radj[v]:
                nd = d + w
                if u not in dist or nd < dist[u]:
                    dist[u] = nd
                    heapq.heappush(heap, (nd, u))
    return table


def reachable_subgraph(icfg: Icfg, targets) -> tuple[list[str], dict[str, int]]:
    """Blocks that can reach at least one target, with dense bitmap ids.

    Returns the blocks in sorted-name order together with their dense index
    assignment; the index order is what makes covered-block bitmaps
    reproducible across runs.
    """
    seen: set[str] = set()
    work = [t for t in targets if t in icfg.block_set]
    seen.update(work)
    while work:
        v = work.pop()
        for u, _kind in icfg.preds[v]:
            if u not in seen:
                seen.add(u)
                work.append(u)
    order = sorted(seen)
    return order, {b: i for i, b in enumerate(order)}


@dataclass
class TargetSpec:
    """Target source locations and their resolution onto blocks.

    ``locations`` carries (name, weight) pairs; ``blocks_by_location`` maps
    each location to the set of blocks containing it.
    """

    locations: list[tuple[str, float]] = field(default_factory=list)
    blocks_by_location: dict[str, set[str]] = field(default_factory=dict)

    def target_blocks(self) -> list[str]:
        blocks: set[str] = set()
        for _name, _w in self.locations:
            blocks.update(self.blocks_by_location.get(_name, ()))
        return sorted(blocks)


def map_target_weights(spec: TargetSpec) -> dict[str, float]:
    """Distribute per-location weights onto target blocks.

    A location contained in ``m`` blocks contributes ``weight/m`` to each of
    them, so the total weight is conserved.  Weights default to 1 per
    location when the caller does not override them.
    """
    weights: dict[str, float] = {b: 0.0 for b in spec.target_blocks()}
    for name, w in spec.locations:
        blocks = sorted(spec.blocks_by_location.get(name, ()))
        if not blocks:
            raise TargetResolutionError(f"target location {name!r} maps to no block")
        share = 1.0 / len(blocks)
        for b in blocks:
            weights[b] += w * share
    return weights
