"""Bottleneck fine-tuning losses over ego subgraphs.

Two terms drive adaptation: a summed cross-entropy over labeled nodes
(`loss_y`) and a summed negative cosine between the main encoder's
predicted view and the target encoder's masked view (`loss_d`). The
total is loss_y + ib_weight * loss_d.

The batched engine stacks ego subgraphs block-diagonally (concatenated
rows, no padding): the clean encoder path needs only each ego's cached
first-layer input and center row, and masked views are rebuilt per step
on a fixed sparse template. `nn.encode_batch` is the padded reference
implementation of the same math; the two paths are pinned against each
other in the test suite.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import nn
from .graphs import EgoSubgraph, Graph, ego_subgraph


@dataclass(eq=False)
class PreppedEgo:
    """Ego subgraph with the clean-path arrays cached.

    `center_w` is the center row of the normalized adjacency (self-loop
    included); together with `ax` it is all the clean forward/backward
    pass needs. `edges` keeps the upper-triangle pairs for masked views.
    """

    global_ids: np.ndarray
    x: np.ndarray
    ax: np.ndarray
    center_w: np.ndarray
    edges: np.ndarray  # (e, 2) local upper-triangle pairs


def _prep(ego: EgoSubgraph) -> PreppedEgo:
    a_hat = nn.normalize_adjacency(ego.adjacency)
    iu, iv = np.nonzero(np.triu(ego.adjacency, k=1))
    return PreppedEgo(
        global_ids=ego.global_ids,
        x=ego.features,
        ax=a_hat @ ego.features,
        center_w=a_hat[0],
        edges=np.stack([iu, iv], axis=1) if len(iu) else np.empty((0, 2), dtype=np.int64),
    )


class EgoStore:
    """Per-graph cache of prepared ego subgraphs (graphs are immutable)."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self._cache: dict[int, PreppedEgo] = {}

    def get(self, node: int) -> PreppedEgo:
        prep = self._cache.get(node)
        if prep is None:
            prep = _prep(ego_subgraph(self.graph, node))
            self._cache[node] = prep
        return prep


_stores: "weakref.WeakKeyDictionary[Graph, EgoStore]" = weakref.WeakKeyDictionary()


def store_for(g: Graph) -> EgoStore:
    store = _stores.get(g)
    if store is None:
        store = EgoStore(g)
        _stores[g] = store
    return store


@dataclass(eq=False)
class EgoBatch:
    """Block-diagonal stack of ego subgraphs.

    Rows of all egos are concatenated; block b occupies rows
    starts[b] .. starts[b]+sizes[b], with its center first. The sparse
    adjacency template (indptr/indices over concatenated rows, plus the
    entry -> undirected-pair map) is fixed; only its data changes when a
    masked view is drawn.
    """

    nodes: list[int]
    sizes: np.ndarray
    starts: np.ndarray
    x: np.ndarray          # (R, d) concatenated features
    ax: np.ndarray         # (R, d) clean normalized-adjacency @ features
    center_w: np.ndarray   # (R,) clean center rows, aligned to rows
    num_pairs: int
    indptr: np.ndarray
    indices: np.ndarray
    entry_pair: np.ndarray
    entry_row: np.ndarray
    center_entries: np.ndarray  # entry ids lying in center rows

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def num_rows(self) -> int:
        return len(self.x)


def batch_egos(store: EgoStore, nodes: list[int]) -> EgoBatch:
    return _stack(list(nodes), [store.get(v) for v in nodes])


def batch_from_egos(egos: list[EgoSubgraph]) -> EgoBatch:
    return _stack([int(e.global_ids[e.center]) for e in egos], [_prep(e) for e in egos])


def _stack(nodes, preps) -> EgoBatch:
    sizes = np.asarray([len(p.x) for p in preps])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    total = int(sizes.sum())
    x = np.concatenate([p.x for p in preps], axis=0)
    ax = np.concatenate([p.ax for p in preps], axis=0)
    center_w = np.zeros(total)
    for off, p in zip(starts, preps):
        center_w[off:off + len(p.center_w)] = p.center_w

    pair_u = np.concatenate([p.edges[:, 0] + off for p, off in zip(preps, starts)])
    pair_v = np.concatenate([p.edges[:, 1] + off for p, off in zip(preps, starts)])
    num_pairs = len(pair_u)
    rows = np.concatenate([pair_u, pair_v]).astype(np.int64)
    cols = np.concatenate([pair_v, pair_u]).astype(np.int64)
    pair_ids = np.concatenate([np.arange(num_pairs)] * 2)
    order = np.lexsort((cols, rows))
    entry_row = rows[order]
    indices = cols[order]
    entry_pair = pair_ids[order]
    indptr = np.zeros(total + 1, dtype=np.int64)
    np.cumsum(np.bincount(entry_row, minlength=total), out=indptr[1:])
    center_entries = np.flatnonzero(np.isin(entry_row, starts))
    return EgoBatch(
        nodes=nodes,
        sizes=sizes,
        starts=starts,
        x=x,
        ax=ax,
        center_w=center_w,
        num_pairs=num_pairs,
        indptr=indptr,
        indices=indices,
        entry_pair=entry_pair,
        entry_row=entry_row,
        center_entries=center_entries,
    )


# --- block-diagonal encoder -------------------------------------------------


@dataclass(eq=False)
class _BlockTrace:
    ax: np.ndarray
    back_mask: np.ndarray
    center_w: np.ndarray
    ah1_center: np.ndarray
    w2: np.ndarray
    starts: np.ndarray
    sizes: np.ndarray


def _block_encode(w1, w2, ax, center_w, starts, sizes, *, dropout, train, rng):
    """Center embeddings of every block; same math as nn.encode_batch."""
    h1 = ax @ w1
    if train and dropout > 0.0:
        keep = 1.0 - dropout
        kept = (h1 > 0) & (rng.random(h1.shape, dtype=np.float32) < keep)
        back_mask = kept * (1.0 / keep)  # relu derivative and inverted dropout, fused
    else:
        back_mask = (h1 > 0).astype(np.float64)
    h1 *= back_mask
    ah1_center = np.add.reduceat(center_w[:, None] * h1, starts, axis=0)
    centers = ah1_center @ w2
    return centers, _BlockTrace(ax, back_mask, center_w, ah1_center, w2, starts, sizes)


def _block_backprop(trace: _BlockTrace, d_centers):
    d_w2 = trace.ah1_center.T @ d_centers
    g = d_centers @ trace.w2.T
    d_h1 = trace.center_w[:, None] * np.repeat(g, trace.sizes, axis=0)
    d_h1 *= trace.back_mask
    d_w1 = trace.ax.T @ d_h1
    return d_w1, d_w2


def _masked_view(batch: EgoBatch, rate: float, rng: np.random.Generator):
    """Masked first-layer input and center rows for the target encoder.

    Draw order: one keep draw per undirected edge, then one per feature
    entry. The normalized adjacency is rebuilt from the surviving edges
    (self-loops handled separately, so the sparse template never changes).
    """
    keep_pair = (rng.random(batch.num_pairs) >= rate).astype(np.float64)
    x_masked = batch.x * (rng.random(batch.x.shape) >= rate)
    total = batch.num_rows
    data = keep_pair[batch.entry_pair] if batch.num_pairs else np.zeros(0)
    degrees = np.bincount(batch.entry_row, weights=data, minlength=total)
    scale = 1.0 / np.sqrt(degrees + 1.0)
    dnorm = data * scale[batch.entry_row] * scale[batch.indices]
    adj = sparse.csr_matrix((dnorm, batch.indices, batch.indptr), shape=(total, total))
    ax_masked = adj @ x_masked + (scale * scale)[:, None] * x_masked
    center_w = np.zeros(total)
    sel = batch.center_entries
    center_w[batch.indices[sel]] = dnorm[sel]
    center_w[batch.starts] += scale[batch.starts] ** 2
    return ax_masked, x_masked, center_w


# --- masked single-ego view (spec surface) ----------------------------------


@dataclass(eq=False)
class MaskedEgo:
    """An ego subgraph with adjacency and feature entries zeroed at the mask rate."""

    base: EgoSubgraph
    adjacency: np.ndarray
    features: np.ndarray
    mask_key: tuple | None = None


def mask_subgraph(
    ego: EgoSubgraph, rate: float, rng: np.random.Generator, mask_key: tuple | None = None
) -> MaskedEgo:
    """Random symmetric masking of one ego subgraph.

    Each upper-triangular adjacency entry is zeroed with probability
    `rate` and mirrored (the graph stays undirected); feature entries are
    zeroed independently at the same rate.
    """
    if not (0.0 <= rate <= 1.0):
        raise ValueError("mask rate must lie in [0, 1]")
    upper = np.triu(rng.random(ego.adjacency.shape) >= rate, k=1)
    keep = upper | upper.T
    return MaskedEgo(
        base=ego,
        adjacency=ego.adjacency * keep,
        features=ego.features * (rng.random(ego.features.shape) >= rate),
        mask_key=mask_key,
    )


# --- losses -----------------------------------------------------------------


def loss_y_batch(
    batch: EgoBatch,
    labels: np.ndarray,
    theta: dict[str, np.ndarray],
    *,
    dropout: float = 0.5,
    train: bool = True,
    rng: np.random.Generator | None = None,
):
    """Summed cross-entropy over the batch; returns (loss, theta gradients)."""
    grads = {k: np.zeros_like(v) for k, v in theta.items()}
    if len(batch) == 0:
        return 0.0, grads
    centers, trace = _block_encode(
        theta["enc_w1"], theta["enc_w2"], batch.ax, batch.center_w,
        batch.starts, batch.sizes, dropout=dropout, train=train, rng=rng,
    )
    scores = nn.classify(theta, centers)
    loss, d_scores = nn.softmax_cross_entropy_batch(scores, np.asarray(labels))
    grads["cls_w"] = centers.T @ d_scores
    grads["cls_b"] = d_scores.sum(axis=0)
    d_centers = d_scores @ theta["cls_w"].T
    grads["enc_w1"], grads["enc_w2"] = _block_backprop(trace, d_centers)
    return loss, grads


def loss_d_batch(
    batch: EgoBatch,
    theta: dict[str, np.ndarray],
    phi: dict[str, np.ndarray],
    *,
    mask_rate: float = 0.1,
    dropout: float = 0.5,
    train: bool = True,
    rng: np.random.Generator | None = None,
):
    """Summed negative cosine between predicted and masked target views.

    Draw order from `rng` is fixed: edge mask, feature mask, main encoder
    dropout, target encoder dropout. Returns (loss, theta gradients,
    phi gradients).
    """
    g_theta = {k: np.zeros_like(v) for k, v in theta.items()}
    g_phi = {k: np.zeros_like(v) for k, v in phi.items()}
    if len(batch) == 0:
        return 0.0, g_theta, g_phi
    if rng is None:
        raise ValueError("loss_d needs a generator for the masked view")
    ax_masked, _, center_w_masked = _masked_view(batch, mask_rate, rng)

    h, trace_main = _block_encode(
        theta["enc_w1"], theta["enc_w2"], batch.ax, batch.center_w,
        batch.starts, batch.sizes, dropout=dropout, train=train, rng=rng,
    )
    p, trace_pred = nn.predict_head(theta, h)
    h_target, trace_target = _block_encode(
        phi["enc_w1"], phi["enc_w2"], ax_masked, center_w_masked,
        batch.starts, batch.sizes, dropout=dropout, train=train, rng=rng,
    )

    loss, d_p, d_target = nn.cosine_loss_batch(p, h_target)
    dw1, db1, dw2, db2, d_h = nn.predict_head_backprop(trace_pred, d_p)
    g_theta["pred_w1"], g_theta["pred_b1"] = dw1, db1
    g_theta["pred_w2"], g_theta["pred_b2"] = dw2, db2
    g_theta["enc_w1"], g_theta["enc_w2"] = _block_backprop(trace_main, d_h)
    g_phi["enc_w1"], g_phi["enc_w2"] = _block_backprop(trace_target, d_target)
    return loss, g_theta, g_phi


def loss_total_batch(
    batch: EgoBatch,
    labels: np.ndarray,
    theta: dict[str, np.ndarray],
    phi: dict[str, np.ndarray],
    *,
    ib_weight: float = 1.0,
    mask_rate: float = 0.1,
    dropout: float = 0.5,
    train: bool = True,
    rng: np.random.Generator | None = None,
):
    """Fused fine-tuning objective: one clean encode feeds both heads.

    Computes loss_y + ib_weight * loss_d with a single main-encoder
    forward/backward (the classifier and predictor heads share the clean
    embeddings, as they share one model in practice). Draw order: edge
    mask, feature mask, shared clean dropout, target dropout. Returns
    (total, loss_y_value, loss_d_value, theta grads of the total,
    phi grads of loss_d alone). With ib_weight == 0 the view term is
    skipped entirely and the result equals plain loss_y.

    In eval mode (no dropout, and masking aside) this is bit-identical
    to combining the standalone losses; under dropout it realizes one
    shared draw instead of two independent ones.
    """
    g_theta = {k: np.zeros_like(v) for k, v in theta.items()}
    g_phi = {k: np.zeros_like(v) for k, v in phi.items()}
    if len(batch) == 0:
        return 0.0, 0.0, 0.0, g_theta, g_phi
    use_view = ib_weight != 0.0
    if use_view:
        if rng is None:
            raise ValueError("the view-agreement term needs a generator")
        ax_masked, _, center_w_masked = _masked_view(batch, mask_rate, rng)

    h, trace_main = _block_encode(
        theta["enc_w1"], theta["enc_w2"], batch.ax, batch.center_w,
        batch.starts, batch.sizes, dropout=dropout, train=train, rng=rng,
    )
    scores = nn.classify(theta, h)
    ly, d_scores = nn.softmax_cross_entropy_batch(scores, np.asarray(labels))
    g_theta["cls_w"] = h.T @ d_scores
    g_theta["cls_b"] = d_scores.sum(axis=0)
    d_h = d_scores @ theta["cls_w"].T

    ld = 0.0
    if use_view:
        p, trace_pred = nn.predict_head(theta, h)
        h_target, trace_target = _block_encode(
            phi["enc_w1"], phi["enc_w2"], ax_masked, center_w_masked,
            batch.starts, batch.sizes, dropout=dropout, train=train, rng=rng,
        )
        ld, d_p, d_target = nn.cosine_loss_batch(p, h_target)
        dw1, db1, dw2, db2, d_h_pred = nn.predict_head_backprop(trace_pred, ib_weight * d_p)
        g_theta["pred_w1"], g_theta["pred_b1"] = dw1, db1
        g_theta["pred_w2"], g_theta["pred_b2"] = dw2, db2
        d_h = d_h + d_h_pred
        g_phi["enc_w1"], g_phi["enc_w2"] = _block_backprop(trace_target, d_target)

    g_theta["enc_w1"], g_theta["enc_w2"] = _block_backprop(trace_main, d_h)
    return ly + ib_weight * ld, ly, ld, g_theta, g_phi


def loss_y(
    g: Graph,
    entries,
    theta: dict[str, np.ndarray],
    train_mode: bool = True,
    rng: np.random.Generator | None = None,
    *,
    dropout: float = 0.5,
):
    """Cross-entropy over (node, local label) pairs on their ego subgraphs."""
    if not entries:
        return 0.0, {k: np.zeros_like(v) for k, v in theta.items()}
    nodes = [v for v, _ in entries]
    labels = np.asarray([y for _, y in entries])
    batch = batch_egos(store_for(g), nodes)
    return loss_y_batch(batch, labels, theta, dropout=dropout, train=train_mode, rng=rng)


def loss_d(
    g: Graph,
    nodes,
    theta: dict[str, np.ndarray],
    phi: dict[str, np.ndarray],
    mask_rate: float = 0.1,
    train_mode: bool = True,
    rng: np.random.Generator | None = None,
    *,
    dropout: float = 0.5,
):
    """View-agreement loss over a node list; returns (loss, theta grads, phi grads)."""
    if not nodes:
        return (
            0.0,
            {k: np.zeros_like(v) for k, v in theta.items()},
            {k: np.zeros_like(v) for k, v in phi.items()},
        )
    batch = batch_egos(store_for(g), list(nodes))
    return loss_d_batch(
        batch, theta, phi, mask_rate=mask_rate, dropout=dropout, train=train_mode, rng=rng
    )


def loss_total(
    g: Graph,
    entries,
    theta: dict[str, np.ndarray],
    phi: dict[str, np.ndarray],
    ib_weight: float = 1.0,
    mask_rate: float = 0.1,
    train_mode: bool = True,
    rng: np.random.Generator | None = None,
    *,
    dropout: float = 0.5,
):
    """Combined loss: loss_y + ib_weight * loss_d over the same entries.

    Gradients combine linearly; the phi gradients carry the ib_weight
    factor (they are gradients of the combined loss).
    """
    if ib_weight < 0:
        raise ValueError("ib_weight must be nonnegative")
    ly, gy = loss_y(g, entries, theta, train_mode, rng, dropout=dropout)
    if ib_weight == 0.0:
        return ly, gy, {k: np.zeros_like(v) for k, v in phi.items()}
    nodes = [v for v, _ in entries]
    ld, gd_theta, gd_phi = loss_d(
        g, nodes, theta, phi, mask_rate, train_mode, rng, dropout=dropout
    )
    total = ly + ib_weight * ld
    g_theta = {k: gy[k] + ib_weight * gd_theta[k] for k in theta}
    g_phi = {k: ib_weight * gd_phi[k] for k in phi}
    return total, g_theta, g_phi


def predict_scores_batch(theta: dict[str, np.ndarray], batch: EgoBatch) -> np.ndarray:
    """Eval-mode class scores for every node in the batch."""
    centers, _ = _block_encode(
        theta["enc_w1"], theta["enc_w2"], batch.ax, batch.center_w,
        batch.starts, batch.sizes, dropout=0.0, train=False, rng=None,
    )
    return nn.classify(theta, centers)


def predict(g: Graph, node: int, theta: dict[str, np.ndarray]) -> int:
    """Eval-mode argmax class of one node; ties break to the lowest index."""
    batch = batch_egos(store_for(g), [node])
    return int(np.argmax(predict_scores_batch(theta, batch)[0]))
