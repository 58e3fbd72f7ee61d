"""Weak-label pools and N-way K-shot task sampling.

Meta-training tasks draw support and query nodes only from the tiny
labeled pool (a handful of labeled nodes per training class); meta-test
tasks draw from all nodes of the test classes. Query nodes are balanced
across the task classes, so the class prior inside every task is uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as streams
from .graphs import Graph


class EpisodeError(ValueError):
    """Raised when a pool or task cannot be built as requested."""


@dataclass(frozen=True)
class WeakLabelPool:
    """Per-class labeled node lists for the meta-training classes."""

    labels_per_class: int
    members: dict[int, tuple[int, ...]]

    def classes(self) -> list[int]:
        return sorted(self.members)

    def to_json(self) -> dict:
        return {str(c): list(nodes) for c, nodes in sorted(self.members.items())}

    @classmethod
    def from_json(cls, payload: dict, labels_per_class: int) -> "WeakLabelPool":
        members = {int(c): tuple(int(v) for v in nodes) for c, nodes in payload.items()}
        return cls(labels_per_class=labels_per_class, members=members)


@dataclass(frozen=True)
class MetaTask:
    """One episode: N task classes, N*K support pairs, balanced query pairs.

    Pairs are (global node id, local label), local labels indexing into
    ``class_ids``.
    """

    class_ids: tuple[int, ...]
    support: tuple[tuple[int, int], ...]
    query: tuple[tuple[int, int], ...]

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    def support_nodes(self) -> list[int]:
        return [v for v, _ in self.support]

    def query_nodes(self) -> list[int]:
        return [v for v, _ in self.query]


def build_pool(g: Graph, labels_per_class: int, seed: int) -> WeakLabelPool:
    """Sample the labeled pool: `labels_per_class` uniform picks per training class."""
    if labels_per_class <= 0:
        raise EpisodeError("labels_per_class must be positive")
    rng = streams.stream(seed, streams.POOL)
    members: dict[int, tuple[int, ...]] = {}
    for c in sorted(g.class_splits.get("train", [])):
        nodes = g.nodes_of_class(c)
        if len(nodes) < labels_per_class:
            raise EpisodeError(
                f"class {c} has only {len(nodes)} nodes, need {labels_per_class} labeled"
            )
        picked = rng.choice(nodes, size=labels_per_class, replace=False)
        members[c] = tuple(int(v) for v in np.sort(picked))
    if not members:
        raise EpisodeError("graph has no training classes")
    return WeakLabelPool(labels_per_class=labels_per_class, members=members)


def _sample_task(
    class_to_nodes: dict[int, np.ndarray],
    n_way: int,
    k_shot: int,
    q_total: int,
    rng: np.random.Generator,
) -> MetaTask:
    if q_total % n_way != 0:
        raise EpisodeError(f"query size {q_total} not divisible by {n_way} classes")
    q_per = q_total // n_way
    classes = sorted(class_to_nodes)
    if len(classes) < n_way:
        raise EpisodeError(f"need {n_way} classes, have {len(classes)}")
    chosen = rng.choice(np.asarray(classes), size=n_way, replace=False)

    support: list[tuple[int, int]] = []
    query: list[tuple[int, int]] = []
    for local, c in enumerate(int(c) for c in chosen):
        nodes = class_to_nodes[c]
        need = k_shot + q_per
        if len(nodes) < need:
            raise EpisodeError(
                f"class {c} has {len(nodes)} usable nodes, need {need} (support+query)"
            )
        picked = rng.choice(nodes, size=need, replace=False)
        support.extend((int(v), local) for v in picked[:k_shot])
        query.extend((int(v), local) for v in picked[k_shot:])
    return MetaTask(
        class_ids=tuple(int(c) for c in chosen),
        support=tuple(support),
        query=tuple(query),
    )


def sample_train_task(
    pool: WeakLabelPool, n_way: int, k_shot: int, q_total: int, rng: np.random.Generator
) -> MetaTask:
    """Sample an episode whose support and query both come from the pool."""
    class_to_nodes = {c: np.asarray(nodes) for c, nodes in pool.members.items()}
    return _sample_task(class_to_nodes, n_way, k_shot, q_total, rng)


def sample_task_from_classes(
    g: Graph,
    classes: list[int],
    n_way: int,
    k_shot: int,
    q_total: int,
    rng: np.random.Generator,
) -> MetaTask:
    class_to_nodes = {c: g.nodes_of_class(c) for c in classes}
    return _sample_task(class_to_nodes, n_way, k_shot, q_total, rng)


def sample_test_task(
    g: Graph, n_way: int, k_shot: int, q_total: int, rng: np.random.Generator
) -> MetaTask:
    """Sample an episode from the full node sets of the meta-test classes."""
    return sample_task_from_classes(g, g.class_splits["test"], n_way, k_shot, q_total, rng)
