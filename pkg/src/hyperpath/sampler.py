"""Exhaustive metapath-instance enumeration from embedding-target nodes.

An instance is a simple path (no repeated nodes) of 2..l nodes starting at a
target node; instances are grouped by their node-type sequence (the
metapath). The enumeration is exact by default; an optional per-metapath cap
subsamples uniformly with a seeded RNG to bound memory on dense graphs.
"""

from __future__ import annotations

import numpy as np

from .hetgraph import HeteroGraph, Metapath

Instance = tuple[int, ...]
InstanceMap = dict[int, dict[Metapath, list[Instance]]]


def enumerate_instances(
    g: HeteroGraph,
    targets: set[int] | list[int] | np.ndarray,
    l: int,
    *,
    max_per_metapath: int | None = None,
    seed: int = 0,
) -> InstanceMap:
    """All simple paths of 2..l nodes from each target, keyed by metapath.

    Within each metapath the instance list is lexicographic by node-id
    sequence, independent of adjacency insertion order. Every target must
    share one node type (the embedding-target type).
    """
    if l < 2:
        raise ValueError(f"maximum path length must be >= 2, got {l}")
    target_list = sorted(int(v) for v in targets)
    if not target_list:
        raise ValueError("targets must be nonempty")
    t0 = g.node_type[target_list[0]]
    if not (g.node_type[target_list] == t0).all():
        raise ValueError("all targets must share the embedding-target node type")

    result: InstanceMap = {}
    for v in target_list:
        per_mp: dict[Metapath, list[Instance]] = {}
        # Depth-first over simple paths; sorted CSR rows make the emission
        # order lexicographic by node sequence.
        path = [v]
        on_path = {v}
        stack: list[tuple[int, int]] = [(v, 0)]  # (node, next neighbor offset)
        while stack:
            node, off = stack[-1]
            row = g.neighbors(node)
            advanced = False
            while off < len(row):
                w = int(row[off])
                off += 1
                if w in on_path:
                    continue
                stack[-1] = (node, off)
                path.append(w)
                on_path.add(w)
                mp = tuple(int(g.node_type[u]) for u in path)
                per_mp.setdefault(mp, []).append(tuple(path))
                if len(path) < l:
                    stack.append((w, 0))
                else:
                    path.pop()
                    on_path.discard(w)
                advanced = True
                break
            if not advanced:
                stack.pop()
                on_path.discard(path.pop())

        if max_per_metapath is not None:
            rng = np.random.default_rng((seed, v))
            for mp, inst in per_mp.items():
                if len(inst) > max_per_metapath:
                    pick = rng.choice(len(inst), size=max_per_metapath, replace=False)
                    per_mp[mp] = [inst[i] for i in sorted(pick)]
        result[v] = per_mp
    return result


def instance_counts(instances: InstanceMap) -> dict[Metapath, int]:
    """Total instance count per metapath across all targets."""
    counts: dict[Metapath, int] = {}
    for per_mp in instances.values():
        for mp, inst in per_mp.items():
            counts[mp] = counts.get(mp, 0) + len(inst)
    return counts


def metapath_order(instances: InstanceMap) -> tuple[Metapath, ...]:
    """Canonical metapath order: by (length, type-id sequence)."""
    mps = {mp for per_mp in instances.values() for mp in per_mp}
    return tuple(sorted(mps, key=lambda m: (len(m), m)))
