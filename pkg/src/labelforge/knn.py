"""Exact k-NN graph construction and threshold-based cluster proposals."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingSet
from .errors import EmptyThresholds, KOutOfRange, NotNormalized


@dataclass(frozen=True)
class KnnGraph:
    """Per-row top-k neighbors by cosine similarity, self excluded.

    ``sims`` rows are sorted descending; ties are broken toward the
    smaller neighbor index.
    """

    neighbors: np.ndarray
    sims: np.ndarray

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


@dataclass(frozen=True)
class ClusterProposal:
    """Candidate cluster: a connected component of the thresholded graph."""

    members: tuple[int, ...]
    threshold: float

    def __post_init__(self):
        members = tuple(sorted(set(int(m) for m in self.members)))
        if len(members) < 1:
            raise ValueError("proposal must have at least one member")
        object.__setattr__(self, "members", members)


def build_knn_graph(emb: EmbeddingSet, k: int, threads: int = 1) -> KnnGraph:
    """Exact top-k cosine neighbors via blockwise dense products."""
    if not emb.normalized:
        raise NotNormalized("build_knn_graph requires unit-norm embeddings")
    n = emb.n
    if not 1 <= k < n:
        raise KOutOfRange(f"k={k} out of range for n={n}")
    rows = emb.rows
    neighbors = np.empty((n, k), dtype=np.int64)
    sims = np.empty((n, k), dtype=np.float64)
    block = max(1, min(1024, n))

    def process(start: int) -> None:
        stop = min(start + block, n)
        s = rows[start:stop] @ rows.T
        for i in range(start, stop):
            s[i - start, i] = -np.inf  # exclude self
        # sort by (-sim, index): stable argsort on index order handles ties
        order = np.argsort(-s, axis=1, kind="stable")[:, :k]
        neighbors[start:stop] = order
        sims[start:stop] = np.take_along_axis(s, order, axis=1)

    starts = range(0, n, block)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(process, starts))
    else:
        for start in starts:
            process(start)
    return KnnGraph(neighbors, sims)


def symmetric_edges(g: KnnGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Union-symmetrized edge list (src < dst, max sim over directions).

    Cached on the graph instance; graphs are immutable after construction.
    """
    cached = getattr(g, "_sym_edges", None)
    if cached is not None:
        return cached
    n, k = g.n, g.k
    src = np.repeat(np.arange(n), k)
    dst = g.neighbors.ravel()
    sim = g.sims.ravel()
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    key = lo * n + hi
    order = np.argsort(key, kind="stable")
    key, lo, hi, sim = key[order], lo[order], hi[order], sim[order]
    uniq, first = np.unique(key, return_index=True)
    # keep the max sim among duplicate directed edges
    best = np.maximum.reduceat(sim, first)
    result = (lo[first], hi[first], best)
    object.__setattr__(g, "_sym_edges", result)
    return result


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _components_at(
    nodes: np.ndarray, lo: np.ndarray, hi: np.ndarray, sim: np.ndarray, t: float
) -> list[np.ndarray]:
    """Connected components of the subgraph on ``nodes`` with sim >= t."""
    pos = {int(v): i for i, v in enumerate(nodes)}
    uf = _UnionFind(len(nodes))
    keep = sim >= t
    for a, b in zip(lo[keep], hi[keep]):
        ia, ib = pos.get(int(a)), pos.get(int(b))
        if ia is not None and ib is not None:
            uf.union(ia, ib)
    groups: dict[int, list[int]] = {}
    for i, v in enumerate(nodes):
        groups.setdefault(uf.find(i), []).append(int(v))
    return [np.array(sorted(g), dtype=np.int64) for g in groups.values()]


def proposals_from_thresholds(
    g: KnnGraph, thresholds: list[float], max_size: int = 300
) -> list[ClusterProposal]:
    """Connected-component proposals at each threshold, oversized ones re-cut.

    Components larger than ``max_size`` are recursively re-cut at the next
    higher threshold; if still oversized at the highest threshold they are
    emitted as-is. Duplicate member-sets across thresholds are deduplicated
    (first threshold wins).
    """
    if not thresholds:
        raise EmptyThresholds("need at least one threshold")
    ts = list(thresholds)
    if any(ts[i] <= ts[i + 1] for i in range(len(ts) - 1)):
        raise ValueError("thresholds must be strictly descending")
    lo, hi, sim = symmetric_edges(g)
    all_nodes = np.arange(g.n, dtype=np.int64)

    out: list[ClusterProposal] = []
    seen: set[tuple[int, ...]] = set()

    def emit(members: np.ndarray, t: float) -> None:
        key = tuple(int(m) for m in members)
        if key not in seen:
            seen.add(key)
            out.append(ClusterProposal(key, t))

    def cut(nodes: np.ndarray, ti: int) -> None:
        t = ts[ti]
        for comp in _components_at(nodes, lo, hi, sim, t):
            if comp.size > max_size and ti > 0:
                cut(comp, ti - 1)
            else:
                emit(comp, t)

    for ti in range(len(ts)):
        cut(all_nodes, ti)
    return out


def default_thresholds(g: KnnGraph, count: int = 8) -> list[float]:
    """Evenly spaced quantiles of the symmetrized edge-sim distribution."""
    _, _, sim = symmetric_edges(g)
    qs = np.linspace(1.0 / (count + 1), count / (count + 1), count)
    vals = np.quantile(sim, qs)
    # descending, deduplicated
    ts = sorted(set(float(v) for v in vals), reverse=True)
    return ts


def save_graph_csv(g: KnnGraph, path) -> None:
    """Inspection dump: one ``src,dst,sim`` line per directed edge."""
    with open(path, "w", newline="") as fh:
        fh.write("src,dst,sim\n")
        for i in range(g.n):
            for j in range(g.k):
                fh.write(f"{i},{int(g.neighbors[i, j])},{g.sims[i, j]:.9f}\n")
