"""Attributed-graph storage: loading, validation, synthesis, and slicing.

A :class:`Graph` is immutable once built (arrays are marked read-only and
the adjacency is never mutated), so it can be shared freely across
concurrent task pipelines. All loaders symmetrize, deduplicate, and strip
self-loops before validation.

File formats
------------
edges      one edge per line, two whitespace-separated node ids
features   CSV, row i holds the float64 feature vector of node i
labels     lines "node_id<TAB>class_id"; unlabeled nodes simply absent
splits     JSON object {"train": [class ids], "val": [...], "test": [...]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


class GraphFormatError(ValueError):
    """Raised when an input file violates the dataset format."""


@dataclass(eq=False)
class Graph:
    """Undirected attributed graph with class-level train/val/test splits.

    ``adjacency`` is a symmetric CSR 0/1 matrix with an empty diagonal;
    ``labels`` holds -1 for unlabeled nodes.
    """

    num_nodes: int
    adjacency: sparse.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    class_splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def nodes_of_class(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass(eq=False)
class EgoSubgraph:
    """Induced subgraph on a node and its 2-hop neighborhood.

    Node 0 is the center; remaining rows follow ascending global id, so
    forward passes and masking are reproducible bit-for-bit.
    """

    center: int
    global_ids: np.ndarray
    adjacency: np.ndarray
    features: np.ndarray

    @property
    def size(self) -> int:
        return len(self.global_ids)


SPLIT_NAMES = ("train", "val", "test")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _build_graph(num_nodes, edges, features, labels, class_splits) -> Graph:
    """Assemble and validate; `edges` is an (m, 2) array of directed pairs."""
    if features.shape[0] != num_nodes:
        raise GraphFormatError(
            f"feature matrix has {features.shape[0]} rows for {num_nodes} nodes"
        )
    if edges.size:
        if edges.min() < 0 or edges.max() >= num_nodes:
            raise GraphFormatError(
                f"edge endpoint {edges.max() if edges.max() >= num_nodes else edges.min()} "
                f"out of range for {num_nodes} nodes"
            )
        keep = edges[:, 0] != edges[:, 1]  # drop self-loops
        edges = edges[keep]
    if edges.size:
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        adj = sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes)
        )
        adj.data[:] = 1.0  # duplicates collapse to a single undirected edge
    else:
        adj = sparse.csr_matrix((num_nodes, num_nodes))
    adj.sum_duplicates()
    adj.data = adj.data.astype(np.float64)

    seen: dict[int, str] = {}
    for name in SPLIT_NAMES:
        for c in class_splits.get(name, []):
            if c in seen:
                raise GraphFormatError(
                    f"class {c} appears in both '{seen[c]}' and '{name}' splits"
                )
            seen[c] = name
    labeled = labels[labels >= 0]
    unknown = set(np.unique(labeled).tolist()) - set(seen)
    if unknown:
        raise GraphFormatError(f"labels reference classes outside all splits: {sorted(unknown)}")

    return Graph(
        num_nodes=num_nodes,
        adjacency=adj,
        features=_freeze(np.ascontiguousarray(features, dtype=np.float64)),
        labels=_freeze(labels.astype(np.int64)),
        class_splits={name: sorted(class_splits.get(name, [])) for name in SPLIT_NAMES},
    )


def load_graph(edge_path, feature_path, label_path, split_path) -> Graph:
    """Load the four-file dataset format into a validated Graph.

    Directed edge lists are symmetrized; duplicate edges and self-loops
    are dropped. Malformed lines are reported with their line number.
    """
    rows = []
    with open(feature_path) as fh:
        dim = None
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError as exc:
                raise GraphFormatError(f"{feature_path}:{lineno}: {exc}") from None
            if dim is None:
                dim = len(row)
            elif len(row) != dim:
                raise GraphFormatError(
                    f"{feature_path}:{lineno}: expected {dim} values, got {len(row)}"
                )
            rows.append(row)
    if not rows:
        raise GraphFormatError(f"{feature_path}: no feature rows")
    features = np.asarray(rows, dtype=np.float64)
    num_nodes = len(rows)

    edge_list = []
    with open(edge_path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != 2:
                raise GraphFormatError(
                    f"{edge_path}:{lineno}: expected two node ids, got {line.strip()!r}"
                )
            try:
                u, v = int(toks[0]), int(toks[1])
            except ValueError:
                raise GraphFormatError(
                    f"{edge_path}:{lineno}: non-integer node id in {line.strip()!r}"
                ) from None
            if u < 0 or v < 0 or u >= num_nodes or v >= num_nodes:
                raise GraphFormatError(
                    f"{edge_path}:{lineno}: node id out of range 0..{num_nodes - 1}"
                )
            edge_list.append((u, v))
    edges = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)

    labels = np.full(num_nodes, -1, dtype=np.int64)
    with open(label_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            toks = line.rstrip("\n").split("\t")
            if len(toks) != 2:
                raise GraphFormatError(
                    f"{label_path}:{lineno}: expected 'node<TAB>class', got {line.strip()!r}"
                )
            try:
                node, cls = int(toks[0]), int(toks[1])
            except ValueError:
                raise GraphFormatError(f"{label_path}:{lineno}: non-integer field") from None
            if node < 0 or node >= num_nodes:
                raise GraphFormatError(
                    f"{label_path}:{lineno}: node id {node} out of range 0..{num_nodes - 1}"
                )
            labels[node] = cls

    with open(split_path) as fh:
        try:
            splits = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{split_path}: invalid JSON: {exc}") from None
    if not isinstance(splits, dict) or set(splits) - set(SPLIT_NAMES):
        raise GraphFormatError(
            f"{split_path}: expected object with keys {SPLIT_NAMES}"
        )
    class_splits = {k: [int(c) for c in splits.get(k, [])] for k in SPLIT_NAMES}

    return _build_graph(num_nodes, edges, features, labels, class_splits)


def dump_graph(g: Graph, edge_path, feature_path, label_path, split_path) -> None:
    """Write a Graph back to the four-file format; exact round-trip."""
    coo = sparse.triu(g.adjacency, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(edge_path, "w") as fh:
        for i in order:
            fh.write(f"{coo.row[i]} {coo.col[i]}\n")
    with open(feature_path, "w") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(label_path, "w") as fh:
        for node in np.flatnonzero(g.labels >= 0):
            fh.write(f"{node}\t{g.labels[node]}\n")
    with open(split_path, "w") as fh:
        json.dump(g.class_splits, fh, indent=2, sort_keys=True)
        fh.write("\n")


GRAPH_FILES = ("edges.txt", "features.csv", "labels.tsv", "splits.json")


def load_graph_dir(path) -> Graph:
    return load_graph(*(os.path.join(path, name) for name in GRAPH_FILES))


def dump_graph_dir(g: Graph, path) -> None:
    os.makedirs(path, exist_ok=True)
    dump_graph(g, *(os.path.join(path, name) for name in GRAPH_FILES))


def generate_sbm(
    classes: int,
    nodes_per_class: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    noise_std: float,
    seed: int,
    split_counts: tuple[int, int, int] | None = None,
) -> Graph:
    """Stochastic block model with separable-but-noisy node features.

    Each class gets a unit-norm orthogonal mean vector (a one-hot basis
    direction), and node features are that mean plus isotropic Gaussian
    noise. Class ids are dealt to train/val/test round-robin until each
    split reaches its requested count (even thirds when unspecified).
    """
    if classes <= 0 or nodes_per_class <= 0 or feature_dim <= 0:
        raise ValueError("classes, nodes_per_class, and feature_dim must be positive")
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ValueError("require 0 <= p_out <= p_in <= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    if feature_dim < classes:
        raise ValueError(
            f"feature_dim={feature_dim} too small for {classes} orthogonal class means"
        )
    if split_counts is None:
        base, extra = divmod(classes, 3)
        split_counts = (base + (extra > 0), base + (extra > 1), base)
    if sum(split_counts) != classes or any(c < 0 for c in split_counts):
        raise ValueError(f"split counts {split_counts} must be nonnegative and sum to {classes}")

    rng = np.random.default_rng(seed)
    n = classes * nodes_per_class
    labels = np.repeat(np.arange(classes), nodes_per_class)

    edge_rows: list[np.ndarray] = []
    edge_cols: list[np.ndarray] = []
    for ci in range(classes):
        for cj in range(ci, classes):
            p = p_in if ci == cj else p_out
            oi, oj = ci * nodes_per_class, cj * nodes_per_class
            if ci == cj:
                iu = np.triu_indices(nodes_per_class, k=1)
                hit = rng.random(len(iu[0])) < p
                edge_rows.append(oi + iu[0][hit])
                edge_cols.append(oj + iu[1][hit])
            else:
                hit = rng.random((nodes_per_class, nodes_per_class)) < p
                r, c = np.nonzero(hit)
                edge_rows.append(oi + r)
                edge_cols.append(oj + c)
    edges = np.stack(
        [np.concatenate(edge_rows), np.concatenate(edge_cols)], axis=1
    ) if edge_rows else np.empty((0, 2), dtype=np.int64)

    means = np.zeros((classes, feature_dim))
    means[np.arange(classes), np.arange(classes)] = 1.0
    features = means[labels] + noise_std * rng.standard_normal((n, feature_dim))

    splits: dict[str, list[int]] = {name: [] for name in SPLIT_NAMES}
    cursor = 0
    for c in range(classes):
        while len(splits[SPLIT_NAMES[cursor % 3]]) >= split_counts[cursor % 3]:
            cursor += 1
        splits[SPLIT_NAMES[cursor % 3]].append(c)
        cursor += 1

    return _build_graph(n, edges, features, labels, splits)


def k_hop_neighbors(g: Graph, node: int, k: int) -> set[int]:
    """Nodes at shortest-path distance 1..k from `node` (node excluded)."""
    if node < 0 or node >= g.num_nodes:
        raise IndexError(f"node {node} out of range for graph with {g.num_nodes} nodes")
    if k < 1:
        raise ValueError("k must be >= 1")
    indptr, indices = g.adjacency.indptr, g.adjacency.indices
    seen = {node}
    frontier = [node]
    out: set[int] = set()
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in indices[indptr[u]:indptr[u + 1]]:
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
                    out.add(v)
        if not nxt:
            break
        frontier = nxt
    return out


def ego_subgraph(g: Graph, node: int) -> EgoSubgraph:
    """Induced 2-hop ego subgraph; center first, then ascending global id."""
    hood = k_hop_neighbors(g, node, 2)
    ids = np.empty(len(hood) + 1, dtype=np.int64)
    ids[0] = node
    ids[1:] = sorted(hood)
    adj = g.adjacency[np.ix_(ids, ids)].toarray().astype(np.float64)
    return EgoSubgraph(
        center=0,
        global_ids=ids,
        adjacency=adj,
        features=np.asarray(g.features[ids], dtype=np.float64),
    )
