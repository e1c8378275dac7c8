"""Heterogeneous graph data model, TSV ingestion, validation and utilities.

Graphs are undirected, with dense 0-based internal node ids and a string-id
sidecar. Adjacency is CSR with sorted neighbor lists and is immutable after
construction. Node types and link types are small integer ids; a link type
exists for each unordered node-type pair that carries at least one edge.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

# A metapath is the sequence of node-type ids along the path.
Metapath = tuple[int, ...]


class GraphFormatError(ValueError):
    """Raised on malformed graph files; message carries file and line number."""


@dataclass(frozen=True)
class HeteroGraph:
    node_type: np.ndarray  # int64 [num_nodes]
    features: np.ndarray  # float64 [num_nodes, feature_dim]
    labels: np.ndarray | None  # int64 [num_nodes], -1 where unlabeled
    indptr: np.ndarray  # int64 [num_nodes + 1]
    indices: np.ndarray  # int64, sorted per row, symmetric
    type_names: tuple[str, ...]
    node_ids: tuple[str, ...]  # external string ids, position = internal id

    @property
    def num_nodes(self) -> int:
        return len(self.node_type)

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def degree(self, v: int) -> int:
        return int(self.indptr[v + 1] - self.indptr[v])

    def edges(self) -> Iterator[tuple[int, int]]:
        """Each undirected edge once, as (u, v) with u < v."""
        for u in range(self.num_nodes):
            for v in self.neighbors(u):
                if u < v:
                    yield u, int(v)

    def type_id(self, name: str) -> int:
        try:
            return self.type_names.index(name)
        except ValueError:
            raise ValueError(f"unknown node type {name!r}") from None

    def nodes_of_type(self, t: int) -> np.ndarray:
        if not 0 <= t < len(self.type_names):
            raise ValueError(f"unknown node type id {t}")
        return np.flatnonzero(self.node_type == t)

    def link_type_pairs(self) -> set[tuple[int, int]]:
        """Unordered node-type pairs that carry at least one edge."""
        pairs = set()
        for u, v in self.edges():
            a, b = int(self.node_type[u]), int(self.node_type[v])
            pairs.add((min(a, b), max(a, b)))
        return pairs

    def validate(self) -> None:
        """Check the heterogeneity condition and type-consistent adjacency."""
        present = len(np.unique(self.node_type))
        pairs = self.link_type_pairs()
        if present + len(pairs) <= 2:
            raise GraphFormatError(
                f"graph is not heterogeneous: {present} node type(s) and "
                f"{len(pairs)} link type(s); need more than 2 combined"
            )

    def metapath_name(self, mp: Metapath) -> str:
        return "-".join(self.type_names[t] for t in mp)

    def parse_metapath(self, text: str) -> Metapath:
        mp = tuple(self.type_id(part) for part in text.split("-"))
        if len(mp) < 2:
            raise ValueError(f"metapath {text!r} must have at least two node types")
        return mp

    def metapath_is_valid(self, mp: Metapath) -> bool:
        """True if every consecutive type pair carries at least one edge."""
        pairs = self.link_type_pairs()
        return all(
            (min(a, b), max(a, b)) in pairs for a, b in zip(mp[:-1], mp[1:])
        )


def build_adjacency(
    num_nodes: int, edges: Sequence[tuple[int, int]] | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrized, deduplicated, per-row-sorted CSR adjacency.

    Idempotent: feeding the resulting edge set back in reproduces the same
    arrays.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        both = np.concatenate([edges, edges[:, ::-1]])
        both = np.unique(both, axis=0)
        src, dst = both[:, 0], both[:, 1]
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst.copy()


def _split_row(line: str, path: str, lineno: int, n_fields: int) -> list[str]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != n_fields:
        raise GraphFormatError(
            f"{path}:{lineno}: expected {n_fields} tab-separated fields, got {len(parts)}"
        )
    return parts


def load_graph(nodes_path: str, edges_path: str) -> HeteroGraph:
    """Load and validate a graph from the nodes.tsv / edges.tsv schema.

    nodes.tsv: ``node_id<TAB>type_name<TAB>label_or_dash<TAB>f1,f2,...,fn``
    edges.tsv: ``src_id<TAB>dst_id``; lines starting with ``#`` are comments.
    """
    ids: list[str] = []
    index: dict[str, int] = {}
    type_names: list[str] = []
    type_index: dict[str, int] = {}
    types: list[int] = []
    labels: list[int] = []
    rows: list[np.ndarray] = []
    dim: int | None = None

    with open(nodes_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            node_id, tname, label, feats = _split_row(line, nodes_path, lineno, 4)
            if node_id in index:
                raise GraphFormatError(f"{nodes_path}:{lineno}: duplicate node id {node_id!r}")
            if tname not in type_index:
                type_index[tname] = len(type_names)
                type_names.append(tname)
            if label == "-":
                labels.append(-1)
            else:
                try:
                    lab = int(label)
                except ValueError:
                    raise GraphFormatError(
                        f"{nodes_path}:{lineno}: label must be an integer or '-', got {label!r}"
                    ) from None
                if lab < 0:
                    raise GraphFormatError(f"{nodes_path}:{lineno}: negative label {lab}")
                labels.append(lab)
            try:
                vec = np.array([float(f) for f in feats.split(",")], dtype=np.float64)
            except ValueError:
                raise GraphFormatError(
                    f"{nodes_path}:{lineno}: cannot parse features {feats!r}"
                ) from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise GraphFormatError(
                    f"{nodes_path}:{lineno}: feature dimension {len(vec)} != {dim}"
                )
            index[node_id] = len(ids)
            ids.append(node_id)
            types.append(type_index[tname])
            rows.append(vec)

    if not ids:
        raise GraphFormatError(f"{nodes_path}: no nodes")

    edge_list: list[tuple[int, int]] = []
    with open(edges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            src, dst = _split_row(line, edges_path, lineno, 2)
            for ref in (src, dst):
                if ref not in index:
                    raise GraphFormatError(
                        f"{edges_path}:{lineno}: edge references unknown node id {ref!r}"
                    )
            u, v = index[src], index[dst]
            if u == v:
                raise GraphFormatError(f"{edges_path}:{lineno}: self-loop on {src!r}")
            edge_list.append((u, v))

    indptr, indices = build_adjacency(len(ids), edge_list)
    lab_arr = np.array(labels, dtype=np.int64)
    g = HeteroGraph(
        node_type=np.array(types, dtype=np.int64),
        features=np.vstack(rows),
        labels=lab_arr if (lab_arr >= 0).any() else None,
        indptr=indptr,
        indices=indices,
        type_names=tuple(type_names),
        node_ids=tuple(ids),
    )
    g.validate()
    return g


def save_graph(g: HeteroGraph, nodes_path: str, edges_path: str) -> None:
    """Write the graph back in the nodes.tsv / edges.tsv schema.

    Floats are written with repr so a load/save/load roundtrip reproduces
    features bit-for-bit.
    """
    with open(nodes_path, "w", encoding="utf-8", newline="\n") as fh:
        for v in range(g.num_nodes):
            label = "-" if g.labels is None or g.labels[v] < 0 else str(int(g.labels[v]))
            feats = ",".join(repr(float(x)) for x in g.features[v])
            fh.write(f"{g.node_ids[v]}\t{g.type_names[g.node_type[v]]}\t{label}\t{feats}\n")
    with open(edges_path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in g.edges():
            fh.write(f"{g.node_ids[u]}\t{g.node_ids[v]}\n")


def degree_distribution(g: HeteroGraph, node_type: int) -> dict[int, int]:
    """Exact histogram (degree -> count) over nodes of the given type."""
    nodes = g.nodes_of_type(node_type)
    return dict(Counter(g.degree(int(v)) for v in nodes))


def metapath_subgraph(g: HeteroGraph, mp: Metapath) -> HeteroGraph:
    """Graph over the endpoint-type nodes of ``mp``, linking u, v iff some
    simple path in ``g`` realizes the metapath's type sequence between them.

    The result is generally homogeneous, so it is not re-validated against
    the heterogeneity condition.
    """
    if len(mp) < 2:
        raise ValueError("metapath must have at least two node types")
    end_types = {mp[0], mp[-1]}
    keep = np.flatnonzero(np.isin(g.node_type, sorted(end_types)))
    remap = {int(v): i for i, v in enumerate(keep)}
    pair_set: set[tuple[int, int]] = set()

    def walk(path: list[int]) -> None:
        depth = len(path)
        if depth == len(mp):
            u, v = path[0], path[-1]
            pair_set.add((min(u, v), max(u, v)))
            return
        for w in g.neighbors(path[-1]):
            w = int(w)
            if g.node_type[w] == mp[depth] and w not in path:
                walk(path + [w])

    for start in np.flatnonzero(g.node_type == mp[0]):
        walk([int(start)])

    edges = [(remap[u], remap[v]) for u, v in sorted(pair_set)]
    indptr, indices = build_adjacency(len(keep), edges)
    return HeteroGraph(
        node_type=g.node_type[keep].copy(),
        features=g.features[keep].copy(),
        labels=None if g.labels is None else g.labels[keep].copy(),
        indptr=indptr,
        indices=indices,
        type_names=g.type_names,
        node_ids=tuple(g.node_ids[int(v)] for v in keep),
    )


def with_features(
    g: HeteroGraph, features: np.ndarray, labels: np.ndarray | None
) -> HeteroGraph:
    """Copy of ``g`` with replaced features/labels."""
    if len(features) != g.num_nodes:
        raise ValueError("feature row count must match node count")
    return replace(g, features=features, labels=labels)
