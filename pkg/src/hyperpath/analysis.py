"""Tree-likeness analysis: BFS all-pairs distances and Gromov delta via the
four-point condition.

For a quadruple (w, x, y, z) the three pairwise distance sums are sorted
S1 >= S2 >= S3 and delta = (S1 - S2) / 2; trees give exactly 0. Graphs are
handled per connected component: delta_max is the max over components and
delta_avg the node-count-weighted mean of component averages, components
with fewer than four nodes contributing (0, 0).
"""

from __future__ import annotations

from collections import deque
from itertools import combinations, islice
from typing import NamedTuple

import numpy as np

from .hetgraph import HeteroGraph

UNREACHABLE = -1
_CHUNK = 200_000


def bfs_apsp(g: HeteroGraph) -> np.ndarray:
    """Exact unweighted shortest-path matrix; UNREACHABLE (-1) marks
    disconnected pairs."""
    n = g.num_nodes
    dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
    for s in range(n):
        row = dist[s]
        row[s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            du = row[u]
            for v in g.neighbors(u):
                if row[v] == UNREACHABLE:
                    row[v] = du + 1
                    queue.append(int(v))
    return dist


def connected_components(g: HeteroGraph) -> list[np.ndarray]:
    """Node sets of the components, each sorted, ordered by smallest node."""
    n = g.num_nodes
    seen = np.zeros(n, dtype=bool)
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        seen[s] = True
        queue = deque([s])
        nodes = [s]
        while queue:
            u = queue.popleft()
            for v in g.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    nodes.append(int(v))
                    queue.append(int(v))
        comps.append(np.array(sorted(nodes), dtype=np.int64))
    return comps


def four_point_deltas(dist: np.ndarray, quads: np.ndarray) -> np.ndarray:
    """Delta of each quadruple given a distance matrix; quads is [Q, 4]."""
    w, x, y, z = quads[:, 0], quads[:, 1], quads[:, 2], quads[:, 3]
    s = np.stack(
        [
            dist[w, x] + dist[y, z],
            dist[w, y] + dist[x, z],
            dist[w, z] + dist[x, y],
        ],
        axis=1,
    ).astype(np.float64)
    s.sort(axis=1)
    return (s[:, 2] - s[:, 1]) / 2.0


class DeltaResult(NamedTuple):
    delta_max: float
    delta_avg: float
    quadruples: int


def _component_delta_exact(dist: np.ndarray) -> tuple[float, float, int]:
    n = dist.shape[0]
    it = combinations(range(n), 4)
    d_max, d_sum, count = 0.0, 0.0, 0
    while True:
        chunk = np.array(list(islice(it, _CHUNK)), dtype=np.int64)
        if chunk.size == 0:
            break
        deltas = four_point_deltas(dist, chunk)
        d_max = max(d_max, float(deltas.max()))
        d_sum += float(deltas.sum())
        count += len(deltas)
    return d_max, d_sum / count, count


def _component_delta_sampled(
    dist: np.ndarray, q: int, rng: np.random.Generator
) -> tuple[float, float, int]:
    n = dist.shape[0]
    d_max, d_sum, count = 0.0, 0.0, 0
    while count < q:
        want = min(_CHUNK, q - count)
        draw = rng.integers(0, n, size=(int(want * 1.3) + 8, 4))
        distinct = (
            (draw[:, 0] != draw[:, 1])
            & (draw[:, 0] != draw[:, 2])
            & (draw[:, 0] != draw[:, 3])
            & (draw[:, 1] != draw[:, 2])
            & (draw[:, 1] != draw[:, 3])
            & (draw[:, 2] != draw[:, 3])
        )
        quads = draw[distinct][:want]
        if len(quads) == 0:
            continue
        deltas = four_point_deltas(dist, quads)
        d_max = max(d_max, float(deltas.max()))
        d_sum += float(deltas.sum())
        count += len(quads)
    return d_max, d_sum / count, count


def gromov_delta(
    g: HeteroGraph, mode: str = "exact", q: int = 100_000, seed: int = 0
) -> DeltaResult:
    """(delta_max, delta_avg) of the graph under the four-point condition.

    ``mode="exact"`` enumerates all C(n, 4) quadruples per component;
    ``mode="sampled"`` draws ``q`` quadruples overall, allocated to
    components proportionally to their quadruple counts.
    """
    if mode not in ("exact", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sampled" and q <= 0:
        raise ValueError(f"sampled mode needs q > 0, got {q}")
    comps = connected_components(g)
    rng = np.random.default_rng(seed)

    weights, averages, total_quads = [], [], 0
    d_max = 0.0
    eligible = [c for c in comps if len(c) >= 4]
    quad_counts = np.array(
        [len(c) * (len(c) - 1) * (len(c) - 2) * (len(c) - 3) / 24 for c in eligible]
    )
    for comp in comps:
        if len(comp) < 4:
            weights.append(len(comp))
            averages.append(0.0)
            continue
        sub = _subgraph_distances(g, comp)
        if mode == "exact":
            cmax, cavg, cnt = _component_delta_exact(sub)
        else:
            share = len(comp) * (len(comp) - 1) * (len(comp) - 2) * (len(comp) - 3) / 24
            qi = max(1, int(round(q * share / quad_counts.sum())))
            cmax, cavg, cnt = _component_delta_sampled(sub, qi, rng)
        weights.append(len(comp))
        averages.append(cavg)
        total_quads += cnt
        d_max = max(d_max, cmax)

    if not weights:
        return DeltaResult(0.0, 0.0, 0)
    avg = float(np.average(averages, weights=weights))
    return DeltaResult(d_max, avg, total_quads)


def _subgraph_distances(g: HeteroGraph, nodes: np.ndarray) -> np.ndarray:
    """BFS distance matrix restricted to one connected component."""
    idx = {int(v): i for i, v in enumerate(nodes)}
    n = len(nodes)
    dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
    for i, s in enumerate(nodes):
        row = dist[i]
        row[i] = 0
        queue = deque([int(s)])
        while queue:
            u = queue.popleft()
            du = row[idx[u]]
            for v in g.neighbors(u):
                j = idx.get(int(v))
                if j is not None and row[j] == UNREACHABLE:
                    row[j] = du + 1
                    queue.append(int(v))
    return dist
