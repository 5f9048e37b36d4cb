"""Path-aware expert placement and a dispatch-locality cost model.

Experts are nodes ``(layer, expert)``. Adjacent-layer top-1 co-activation
counts from a routing trace are the edge weights. Placement greedily
co-locates heavily coupled nodes on the same shard, every shard holding
exactly ``E / shards`` experts of each layer. Sequences are then bucketed
onto the shard of their first-layer routing and each dispatch is scored
local or remote.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .theory import co_occurrence
from .trace import RoutingTrace

DEFAULT_REMOTE_PENALTY = 0.1


@dataclass(frozen=True)
class CoActivationGraph:
    counts: np.ndarray  # (L-1, E, E); counts[l, e, nu] = #tokens with top-1 e at l and nu at l+1

    @property
    def L(self) -> int:
        return self.counts.shape[0] + 1

    @property
    def E(self) -> int:
        return self.counts.shape[1]

    def edges(self):
        """Non-zero edges as ``(weight, l, e, nu)``, heaviest first, ties by lowest indices."""
        l, e, nu = np.nonzero(self.counts)
        w = self.counts[l, e, nu]
        order = np.lexsort((nu, e, l, -w))
        return [(int(w[i]), int(l[i]), int(e[i]), int(nu[i])) for i in order]


@dataclass(frozen=True)
class Placement:
    shards: int
    assign: np.ndarray  # (L, E) shard of each (layer, expert)

    def __post_init__(self):
        a = np.asarray(self.assign, dtype=np.int64)
        object.__setattr__(self, "assign", a)
        L, E = a.shape
        if self.shards < 1 or E % self.shards:
            raise ValueError(f"shards={self.shards} must divide E={E}")
        cap = E // self.shards
        for l in range(L):
            counts = np.bincount(a[l], minlength=self.shards)
            if a[l].min() < 0 or a[l].max() >= self.shards or (counts != cap).any():
                raise ValueError(f"layer {l} does not place exactly {cap} experts on each shard")

    @property
    def capacity(self) -> int:
        return self.assign.shape[1] // self.shards

    def to_dict(self) -> dict:
        return {"shards": int(self.shards), "assign": self.assign.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        return cls(int(d["shards"]), np.asarray(d["assign"], dtype=np.int64))


@dataclass(frozen=True)
class CostReport:
    local_fraction: float
    remote_dispatches: int
    total_dispatches: int
    est_throughput_ratio: float
    remote_penalty: float

    def to_dict(self) -> dict:
        return {
            "local_fraction": self.local_fraction,
            "remote_dispatches": self.remote_dispatches,
            "total_dispatches": self.total_dispatches,
            "est_throughput_ratio": self.est_throughput_ratio,
            "remote_penalty": self.remote_penalty,
        }


def build_graph(trace: RoutingTrace) -> CoActivationGraph:
    if trace.tokens.size == 0:
        raise ValueError("empty trace")
    if trace.L < 2:
        raise ValueError("co-activation graph needs at least two layers")
    counts = np.stack([co_occurrence(trace.layer_top1(l), trace.layer_top1(l + 1), trace.E) for l in range(trace.L - 1)])
    return CoActivationGraph(counts)


def round_robin(E: int, L: int, shards: int) -> Placement:
    return Placement(shards, np.tile(np.arange(E) % shards, (L, 1)))


def local_mass(graph: CoActivationGraph, placement: Placement) -> int:
    """Total edge weight whose endpoints share a shard."""
    a = placement.assign
    same = a[:-1, :, None] == a[1:, None, :]
    return int((graph.counts * same).sum())


def _neighbor_weight(graph: CoActivationGraph, assign: np.ndarray, l: int, e: int, shard: int) -> int:
    w = 0
    if l > 0:
        w += int(graph.counts[l - 1, :, e][assign[l - 1] == shard].sum())
    if l < graph.L - 1:
        w += int(graph.counts[l, e, :][assign[l + 1] == shard].sum())
    return w


def partition(graph: CoActivationGraph, shards: int) -> Placement:
    """Greedy heaviest-edge agglomeration under per-layer capacity, then pairwise-swap refinement.

    1. Edges are scanned heaviest first; two groups merge when the union
       still fits one shard (at most ``E/shards`` experts per layer).
    2. Multi-node groups go whole, largest first, to the lowest shard with
       room; a group that no longer fits anywhere is placed node by node.
    3. Remaining nodes pick the shard with the most coupled weight to
       already-placed neighbours; ties prefer round-robin ``e mod shards``,
       then the lowest shard index.
    4. Swapping two same-layer experts across shards is applied while it
       strictly increases the co-located weight.

    A zero-weight graph therefore yields the round-robin placement.
    """
    L, E = graph.L, graph.E
    if shards < 1 or E % shards:
        raise ValueError(f"capacity infeasible: shards={shards} must divide E={E}")
    cap = E // shards
    node = lambda l, e: l * E + e  # noqa: E731
    parent = list(range(L * E))
    size = np.zeros((L * E, L), dtype=np.int64)
    for l in range(L):
        for e in range(E):
            size[node(l, e), l] = 1

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for _, l, e, nu in graph.edges():
        a, b = find(node(l, e)), find(node(l + 1, nu))
        if a == b or (size[a] + size[b] > cap).any():
            continue
        a, b = min(a, b), max(a, b)
        parent[b] = a
        size[a] += size[b]

    groups: dict[int, list[int]] = {}
    for n in range(L * E):
        groups.setdefault(find(n), []).append(n)

    assign = np.full((L, E), -1, dtype=np.int64)
    load = np.zeros((shards, L), dtype=np.int64)
    multi = sorted((g for g in groups.values() if len(g) > 1), key=lambda g: (-len(g), g[0]))
    leftovers: list[int] = [g[0] for g in groups.values() if len(g) == 1]
    for g in multi:
        need = size[find(g[0])]
        for s in range(shards):
            if (load[s] + need <= cap).all():
                for n in g:
                    assign[n // E, n % E] = s
                load[s] += need
                break
        else:
            leftovers.extend(g)

    for n in sorted(leftovers):
        l, e = divmod(n, E)
        open_ = [s for s in range(shards) if load[s, l] < cap]
        rr = e % shards
        best = max(open_, key=lambda s: (_neighbor_weight(graph, assign, l, e, s), s == rr, -s))
        assign[l, e] = best
        load[best, l] += 1

    _refine(graph, assign)
    return Placement(shards, assign)


def _refine(graph: CoActivationGraph, assign: np.ndarray, max_rounds: int = 100) -> None:
    L, E = assign.shape
    for _ in range(max_rounds):
        improved = False
        for l in range(L):
            for e in range(E):
                for f in range(e + 1, E):
                    se, sf = assign[l, e], assign[l, f]
                    if se == sf:
                        continue
                    before = _neighbor_weight(graph, assign, l, e, se) + _neighbor_weight(graph, assign, l, f, sf)
                    after = _neighbor_weight(graph, assign, l, e, sf) + _neighbor_weight(graph, assign, l, f, se)
                    if after > before:
                        assign[l, e], assign[l, f] = sf, se
                        improved = True
        if not improved:
            return


def bucket_and_score(trace: RoutingTrace, placement: Placement, remote_penalty: float = DEFAULT_REMOTE_PENALTY) -> CostReport:
    """Bucket each sequence (trace step) and count local (token, layer) dispatches.

    A sequence's bucket is the shard hosting most of its tokens' first-layer
    top-1 experts (ties to the lowest shard). Each top-1 dispatch at the
    later layers is local iff its expert sits on that shard; the first layer
    chose the bucket and is not scored. A one-layer trace scores layer 0.
    """
    if placement.assign.shape != (trace.L, trace.E):
        raise ValueError(f"placement covers {placement.assign.shape}, trace has L={trace.L}, E={trace.E}")
    top1 = trace.top1  # (S, L, B)
    shard_of = placement.assign[np.arange(trace.L)[None, :, None], top1]  # (S, L, B)
    S = top1.shape[0]
    first = shard_of[:, 0, :]
    votes = np.zeros((S, placement.shards), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(S), first.shape[1]), first.ravel()), 1)
    bucket = np.argmax(votes, axis=1)
    scored = shard_of[:, 1:] if trace.L > 1 else shard_of
    local = scored == bucket[:, None, None]
    total = int(local.size)
    remote = int(total - local.sum())
    remote_frac = remote / total if total else 0.0
    return CostReport(
        local_fraction=1.0 - remote_frac,
        remote_dispatches=remote,
        total_dispatches=total,
        est_throughput_ratio=1.0 / (1.0 - remote_penalty * remote_frac),
        remote_penalty=remote_penalty,
    )
