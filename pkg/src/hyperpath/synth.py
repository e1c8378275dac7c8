"""Synthetic heterogeneous graphs for robustness studies.

Pipeline: preferential-attachment topology -> i.i.d. node-type assignment
(edges whose endpoint pair is not an allowed relation are dropped) ->
class-conditional Gaussian features on the target type. Everything is
deterministic per seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .hetgraph import HeteroGraph, build_adjacency, save_graph, with_features

# Node types and the relations the heterogenized graph keeps.
TYPE_NAMES = ("A", "B", "C")
ALLOWED_PAIRS = {(0, 1), (0, 2)}  # A-B, A-C


def generate_ba(n: int, m: int, seed: int) -> np.ndarray:
    """Preferential-attachment edge list [E, 2].

    Starts from an m-node clique; each new node attaches to m distinct
    existing nodes with probability proportional to degree (uniform while
    every degree is zero). Edge count is C(m, 2) + (n - m) * m.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if n <= m:
        raise ValueError(f"need n > m, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    edges: list[tuple[int, int]] = [(i, j) for i in range(m) for j in range(i + 1, m)]
    # Nodes repeated once per incident edge: sampling uniformly from this
    # list is degree-proportional sampling.
    repeated: list[int] = [v for e in edges for v in e]
    for new in range(m, n):
        targets: set[int] = set()
        while len(targets) < m:
            if repeated:
                targets.add(repeated[rng.integers(len(repeated))])
            else:  # m = 1 bootstrap: single existing node, all degrees zero
                targets.add(int(rng.integers(new)))
        for t in sorted(targets):
            edges.append((t, new))
            repeated.extend((t, new))
    return np.array(edges, dtype=np.int64)


@dataclass(frozen=True)
class HeterogenizeResult:
    graph: HeteroGraph
    dropped_edges: int
    kept_edges: int


def heterogenize(
    edges: np.ndarray, n: int, proportions: tuple[float, float, float], seed: int
) -> HeterogenizeResult:
    """Assign types {A, B, C} i.i.d. by proportion and keep only A-B / A-C
    edges. The returned graph has empty (0-dim) features."""
    props = np.asarray(proportions, dtype=np.float64)
    if props.shape != (3,) or abs(props.sum() - 1.0) > 1e-9 or (props < 0).any():
        raise ValueError("proportions must be three nonnegative values summing to 1")
    rng = np.random.default_rng(seed)
    types = rng.choice(3, size=n, p=props)
    kept = [
        (int(u), int(v))
        for u, v in edges
        if (min(types[u], types[v]), max(types[u], types[v])) in ALLOWED_PAIRS
    ]
    indptr, indices = build_adjacency(n, kept)
    g = HeteroGraph(
        node_type=types.astype(np.int64),
        features=np.zeros((n, 0)),
        labels=None,
        indptr=indptr,
        indices=indices,
        type_names=TYPE_NAMES,
        node_ids=tuple(str(i) for i in range(n)),
    )
    return HeterogenizeResult(graph=g, dropped_edges=len(edges) - len(kept), kept_edges=len(kept))


def gen_features(
    g: HeteroGraph,
    mu: float,
    sigma: float,
    feature_dim: int = 2000,
    seed: int = 0,
    *,
    num_classes: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional Gaussian features and labels for the A-type nodes.

    A nodes are labeled uniformly i.i.d.; class k's coordinates are drawn
    from N(center_k, sigma^2) with centers (-mu, 0, mu). Other node types
    draw every coordinate from the centre Gaussian N(0, sigma^2). Labels are
    -1 off the A type.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    n = g.num_nodes
    labels = np.full(n, -1, dtype=np.int64)
    a_nodes = g.nodes_of_type(0)
    labels[a_nodes] = rng.integers(num_classes, size=len(a_nodes))
    centers = np.linspace(-mu, mu, num_classes)
    features = rng.standard_normal((n, feature_dim)) * sigma
    for k in range(num_classes):
        features[labels == k] += centers[k]
    return features, labels


def synth_dataset(
    n: int,
    m: int,
    proportions: tuple[float, float, float],
    mu: float,
    sigma: float,
    feature_dim: int,
    seed: int,
) -> tuple[HeteroGraph, dict]:
    """Full synthetic dataset plus its manifest."""
    ss = np.random.SeedSequence(seed).spawn(3)
    edges = generate_ba(n, m, ss[0])
    het = heterogenize(edges, n, proportions, ss[1])
    features, labels = gen_features(het.graph, mu, sigma, feature_dim, ss[2])
    g = with_features(het.graph, features, labels)
    g.validate()
    manifest = {
        "n": n,
        "m": m,
        "proportions": list(proportions),
        "mu": mu,
        "sigma": sigma,
        "feature_dim": feature_dim,
        "seed": seed,
        "dropped_edges": het.dropped_edges,
        "kept_edges": het.kept_edges,
        "type_counts": {
            TYPE_NAMES[t]: int((g.node_type == t).sum()) for t in range(3)
        },
    }
    return g, manifest


def write_dataset(g: HeteroGraph, manifest: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_graph(g, os.path.join(out_dir, "nodes.tsv"), os.path.join(out_dir, "edges.tsv"))
    with open(os.path.join(out_dir, "synth_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
