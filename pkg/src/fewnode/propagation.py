"""Poisson label propagation over per-task hybrid subgraphs.

For each episode we assemble a small subgraph around the support nodes
(their 2-hop neighborhoods plus a few random nodes and *their* 2-hop
neighborhoods), wire it with a convex blend of the structural adjacency
and a feature-distance affinity, and run the source-driven Jacobi
iteration

    U <- U + D^-1 (B^T - L U),   L = D - A,  U^(0) = 0,

whose sources are the mean-centered one-hot labels of the support nodes.
Low-entropy rows of U become pseudo-labels that extend the support set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .episodes import MetaTask
from .graphs import Graph, k_hop_neighbors

log = logging.getLogger(__name__)


class PropagationError(ValueError):
    """Raised when the propagation system is degenerate (e.g. zero-degree rows)."""


@dataclass(eq=False)
class PoissonSubgraph:
    """Ordered task subgraph: support rows first, then the sampled rest.

    ``sources`` is the N x |V_s| source matrix whose first N*K columns are
    the mean-centered support one-hots and whose remaining columns are 0.
    """

    node_ids: np.ndarray
    num_support: int
    a_struct: np.ndarray
    label_matrix: np.ndarray  # N x N*K, column i one-hot for support node i
    label_mean: np.ndarray    # length-N mean of the support one-hots
    sources: np.ndarray       # N x |V_s|
    a_feat: np.ndarray | None = None
    a_combined: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True)
class PseudoLabel:
    node: int
    local_label: int
    entropy: float


@dataclass(frozen=True)
class AugmentedSupport:
    """Support entries plus admitted pseudo-labels: (node, local label, is_pseudo)."""

    entries: tuple[tuple[int, int, bool], ...]

    def nodes(self) -> list[int]:
        return [v for v, _, _ in self.entries]

    def labeled_pairs(self) -> list[tuple[int, int]]:
        return [(v, y) for v, y, _ in self.entries]

    def num_pseudo(self) -> int:
        return sum(1 for _, _, p in self.entries if p)


def assemble_subgraph(
    g: Graph,
    task: MetaTask,
    r_random: int,
    rng: np.random.Generator,
    candidate_mask: np.ndarray | None = None,
    include_nodes: list[int] | None = None,
) -> PoissonSubgraph:
    """Collect the propagation node set and its structural adjacency.

    The node set is support ∪ 2-hop(support) ∪ R random picks ∪ 2-hop(picks),
    support-first in task order, remainder in ascending global id. The
    random picks are drawn from nodes outside support ∪ 2-hop(support);
    `candidate_mask` further restricts that draw (used to keep meta-training
    propagation away from held-out classes). `include_nodes` forces extra
    nodes into the subgraph (used by the propagation-only baseline).
    """
    if r_random < 0:
        raise ValueError("r_random must be >= 0")
    support_ids = task.support_nodes()
    support_set = set(support_ids)

    hood: set[int] = set()
    for v in support_ids:
        hood |= k_hop_neighbors(g, v, 2)

    candidates = np.ones(g.num_nodes, dtype=bool)
    candidates[support_ids] = False
    candidates[list(hood)] = False
    if candidate_mask is not None:
        candidates &= candidate_mask
    candidate_ids = np.flatnonzero(candidates)

    picked: list[int] = []
    if r_random > 0:
        if len(candidate_ids) < r_random:
            log.warning(
                "only %d random-sampling candidates available, wanted %d",
                len(candidate_ids), r_random,
            )
        if len(candidate_ids) > 0:
            take = min(r_random, len(candidate_ids))
            picked = [int(v) for v in rng.choice(candidate_ids, size=take, replace=False)]

    picked_hood: set[int] = set()
    for v in picked:
        picked_hood |= k_hop_neighbors(g, v, 2)

    others = (hood | set(picked) | picked_hood) - support_set
    if include_nodes:
        others |= set(int(v) for v in include_nodes) - support_set

    node_ids = np.asarray(support_ids + sorted(others), dtype=np.int64)
    a_struct = g.adjacency[np.ix_(node_ids, node_ids)].toarray().astype(np.float64)

    n_way = task.n_way
    nk = len(support_ids)
    label_matrix = np.zeros((n_way, nk))
    for i, (_, local) in enumerate(task.support):
        label_matrix[local, i] = 1.0
    label_mean = label_matrix.mean(axis=1)
    sources = np.zeros((n_way, len(node_ids)))
    sources[:, :nk] = label_matrix - label_mean[:, None]

    return PoissonSubgraph(
        node_ids=node_ids,
        num_support=nk,
        a_struct=a_struct,
        label_matrix=label_matrix,
        label_mean=label_mean,
        sources=sources,
    )


def feature_affinity(features: np.ndarray, scale: float, normalize: bool = False) -> np.ndarray:
    """Pairwise affinity exp(-scale * ||x_i - x_j||_2) with a zero diagonal."""
    if scale <= 0:
        raise ValueError("affinity scale must be positive")
    x = np.asarray(features, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    aff = np.exp(-scale * np.sqrt(d2))
    np.fill_diagonal(aff, 0.0)
    # enforce exact symmetry against float round-off in the Gram term
    return 0.5 * (aff + aff.T)


def combine_adjacency(a_struct: np.ndarray, a_feat: np.ndarray, structure_weight: float) -> np.ndarray:
    """Convex blend: structure_weight * A_struct + (1 - structure_weight) * A_feat."""
    if a_struct.shape != a_feat.shape:
        raise ValueError(f"shape mismatch: {a_struct.shape} vs {a_feat.shape}")
    if not (0.0 <= structure_weight <= 1.0):
        raise ValueError("structure_weight must lie in [0, 1]")
    return structure_weight * a_struct + (1.0 - structure_weight) * a_feat


def poisson_iterate(a: np.ndarray, sources: np.ndarray, steps: int) -> np.ndarray:
    """Run the source-driven Jacobi iteration from U = 0 for `steps` steps.

    Requires every weighted degree to be positive; with a blended adjacency
    that holds whenever the structure weight is < 1 or the structural part
    has no isolated rows.
    """
    degrees = a.sum(axis=1)
    if np.any(degrees <= 0.0):
        bad = int(np.argmin(degrees))
        raise PropagationError(
            f"subgraph row {bad} has zero weighted degree; use structure_weight < 1 "
            "or repair connectivity before propagating"
        )
    bt = sources.T
    u = np.zeros_like(bt)
    d = degrees[:, None]
    for _ in range(steps):
        lu = d * u - a @ u
        u = u + (bt - lu) / d
    return u


def prediction_entropy(u: np.ndarray) -> np.ndarray:
    """Per-row softmax entropy of the propagated scores (natural log)."""
    z = u - u.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return -xlogy(p, p).sum(axis=1)


def select_pseudo_labels(
    u: np.ndarray,
    entropy: np.ndarray,
    subgraph: PoissonSubgraph,
    count: int,
) -> list[PseudoLabel]:
    """Pick the `count` lowest-entropy non-support rows as pseudo-labels.

    Entropy ties break by ascending global node id; each label is the
    argmax of the node's propagated row.
    """
    nk = subgraph.num_support
    cand = np.arange(nk, len(subgraph.node_ids))
    if len(cand) < count:
        log.warning("only %d pseudo-label candidates available, wanted %d", len(cand), count)
        count = len(cand)
    order = np.lexsort((subgraph.node_ids[cand], entropy[cand]))
    chosen = cand[order[:count]]
    return [
        PseudoLabel(
            node=int(subgraph.node_ids[i]),
            local_label=int(np.argmax(u[i])),
            entropy=float(entropy[i]),
        )
        for i in chosen
    ]


def augment(task: MetaTask, pseudo: list[PseudoLabel]) -> AugmentedSupport:
    entries = [(v, y, False) for v, y in task.support]
    entries += [(p.node, p.local_label, True) for p in pseudo]
    return AugmentedSupport(entries=tuple(entries))


@dataclass(eq=False)
class PropagationResult:
    subgraph: PoissonSubgraph
    scores: np.ndarray
    entropy: np.ndarray
    pseudo: list[PseudoLabel]
    augmented: AugmentedSupport


def augment_support(
    g: Graph,
    task: MetaTask,
    rng: np.random.Generator,
    *,
    r_random: int = 10,
    pseudo_count: int = 20,
    steps: int = 10,
    affinity_scale: float = 100.0,
    structure_weight: float = 0.5,
    normalize_features: bool = False,
    candidate_mask: np.ndarray | None = None,
) -> PropagationResult:
    """Full pseudo-labeling pipeline for one task."""
    sub = assemble_subgraph(g, task, r_random, rng, candidate_mask=candidate_mask)
    sub.a_feat = feature_affinity(
        g.features[sub.node_ids], affinity_scale, normalize=normalize_features
    )
    sub.a_combined = combine_adjacency(sub.a_struct, sub.a_feat, structure_weight)
    scores = poisson_iterate(sub.a_combined, sub.sources, steps)
    ent = prediction_entropy(scores)
    pseudo = select_pseudo_labels(scores, ent, sub, pseudo_count)
    return PropagationResult(
        subgraph=sub,
        scores=scores,
        entropy=ent,
        pseudo=pseudo,
        augmented=augment(task, pseudo),
    )
