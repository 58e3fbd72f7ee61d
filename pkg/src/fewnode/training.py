"""Episodic optimization: per-task fine-tuning and two-rate meta-updates.

Each episode augments its support set with Poisson pseudo-labels, runs T
full-batch gradient steps on the main parameter group (the target
encoder stays frozen), then applies one meta-update per group from the
query-set gradients: the combined loss drives the main group, the
view-agreement loss alone drives the target encoder. Gradients are
first-order: evaluated at the adapted parameters, applied to the
originals.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ib, nn
from . import rng as streams
from .episodes import (
    EpisodeError,
    MetaTask,
    build_pool,
    sample_task_from_classes,
    sample_train_task,
)
from .graphs import Graph
from .propagation import assemble_subgraph, augment_support, combine_adjacency, feature_affinity, poisson_iterate

log = logging.getLogger(__name__)

ABLATION_MODES = ("full", "no_pseudo", "no_ib", "neither")
PROPAGATION_POOLS = ("train", "all")


class ConfigError(ValueError):
    """Raised when a run configuration is malformed."""


class EpisodeAbort(RuntimeError):
    """Raised when an episode produces a non-finite loss; the episode is skipped."""


@dataclass
class TrainConfig:
    n_way: int = 5
    k_shot: int = 3
    query_size: int = 10
    labels_per_class: int = 5
    random_nodes: int = 10
    pseudo_count: int = 20
    propagation_steps: int = 10
    affinity_scale: float = 100.0
    structure_weight: float = 0.5
    normalize_features: bool = False
    finetune_steps: int = 40
    finetune_lr: float = 0.1
    ib_weight: float = 1.0
    mask_rate: float = 0.1
    dropout: float = 0.5
    meta_lr: float = 0.005
    target_lr: float = 0.005
    train_episodes: int = 5000
    test_tasks: int = 500
    hidden_dim: int = 64
    predictor_hidden: int = 128
    seed: int = 0
    ablation: str = "full"
    propagation_pool: str = "train"
    checkpoint_interval: int = 0
    val_interval: int = 0
    val_tasks: int = 50
    workers: int = 1

    def validate(self) -> "TrainConfig":
        if self.ablation not in ABLATION_MODES:
            raise ConfigError(f"ablation must be one of {ABLATION_MODES}, got {self.ablation!r}")
        if self.propagation_pool not in PROPAGATION_POOLS:
            raise ConfigError(
                f"propagation_pool must be one of {PROPAGATION_POOLS}, got {self.propagation_pool!r}"
            )
        positive = ("n_way", "k_shot", "query_size", "labels_per_class", "hidden_dim",
                    "predictor_hidden")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        nonneg = ("random_nodes", "pseudo_count", "propagation_steps", "finetune_steps",
                  "finetune_lr", "ib_weight", "meta_lr", "target_lr", "train_episodes",
                  "test_tasks", "checkpoint_interval", "val_interval", "val_tasks")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not (0.0 <= self.mask_rate <= 1.0):
            raise ConfigError("mask_rate must lie in [0, 1]")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        if not (0.0 <= self.structure_weight <= 1.0):
            raise ConfigError("structure_weight must lie in [0, 1]")
        if self.affinity_scale <= 0:
            raise ConfigError("affinity_scale must be positive")
        if self.query_size % self.n_way != 0:
            raise ConfigError(
                f"query_size {self.query_size} must be divisible by n_way {self.n_way}"
            )
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(payload) - set(known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        cfg = cls(**payload)
        for f in fields(cls):
            value = getattr(cfg, f.name)
            default = getattr(cls(), f.name)
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"config field {f.name} must be a boolean")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"config field {f.name} must be an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"config field {f.name} must be a number")
                setattr(cfg, f.name, float(value))
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"config field {f.name} must be a string")
        return cfg.validate()

    # ablation switches
    def uses_pseudo(self) -> bool:
        return self.ablation in ("full", "no_ib")

    def uses_ib(self) -> bool:
        return self.ablation in ("full", "no_pseudo")


@dataclass
class EpisodeRecord:
    episode: int
    support_size: int
    pseudo_precision: float | None
    loss_y: float
    loss_d: float
    loss: float
    query_acc: float


@dataclass
class EvalReport:
    per_task: list[float]
    mean: float
    std: float
    seed: int
    config: dict
    wall_clock_s: float

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "per_task": self.per_task,
            "seed": self.seed,
            "config": self.config,
            "wall_clock_s": self.wall_clock_s,
        }


def init_for_graph(g: Graph, cfg: TrainConfig) -> nn.ParamSet:
    return nn.init_params(
        g.feature_dim, cfg.hidden_dim, cfg.predictor_hidden, cfg.n_way, cfg.seed
    )


def propagation_candidate_mask(g: Graph, cfg: TrainConfig) -> np.ndarray | None:
    """Random-sampling restriction for meta-training propagation.

    In the default "train" pool the random picks are limited to nodes of
    meta-training classes plus unlabeled nodes, to keep held-out-class
    nodes from being pulled in deliberately; "all" lifts the restriction.
    """
    if cfg.propagation_pool == "all":
        return None
    allowed = np.isin(g.labels, np.asarray(g.class_splits["train"], dtype=np.int64))
    allowed |= g.labels < 0
    return allowed


def _augmented_entries(g, task, cfg, rng, candidate_mask):
    """Support entries for fine-tuning plus bookkeeping for the episode log."""
    if not cfg.uses_pseudo():
        return list(task.support), None
    result = augment_support(
        g, task, rng,
        r_random=cfg.random_nodes,
        pseudo_count=cfg.pseudo_count,
        steps=cfg.propagation_steps,
        affinity_scale=cfg.affinity_scale,
        structure_weight=cfg.structure_weight,
        normalize_features=cfg.normalize_features,
        candidate_mask=candidate_mask,
    )
    pseudo = result.pseudo
    if pseudo:
        hits = sum(
            1 for p in pseudo if g.labels[p.node] == task.class_ids[p.local_label]
        )
        precision = hits / len(pseudo)
    else:
        precision = None
    return result.augmented.labeled_pairs(), precision


def _combined_loss(batch, labels, params: nn.ParamSet, cfg: TrainConfig, rng):
    """Fine-tuning objective on a prepared batch.

    Returns (total, loss_y, loss_d, theta grads of the total, raw phi
    grads of the view term). Ablations without the view term reduce the
    objective to the cross-entropy alone.
    """
    weight = cfg.ib_weight if cfg.uses_ib() else 0.0
    return ib.loss_total_batch(
        batch, labels, params.theta, params.phi,
        ib_weight=weight, mask_rate=cfg.mask_rate,
        dropout=cfg.dropout, train=True, rng=rng,
    )


def fine_tune(
    params: nn.ParamSet,
    g: Graph,
    support_entries,
    cfg: TrainConfig,
    key_prefix: tuple[int, ...],
    *,
    on_divergence: str = "raise",
) -> nn.ParamSet:
    """T full-batch gradient steps on the main group; target group frozen.

    Returns a fresh ParamSet; the input is never touched. Step t draws
    its masks from stream (seed, *key_prefix, t). A non-finite loss
    aborts the episode (`on_divergence="raise"`, the training contract)
    or stops at the last finite iterate (`"stop"`, used by evaluation so
    one pathological task cannot sink a report).
    """
    theta = {k: v.copy() for k, v in params.theta.items()}
    nodes = [v for v, _ in support_entries]
    labels = np.asarray([y for _, y in support_entries])
    batch = ib.batch_egos(ib.store_for(g), nodes)
    adapted = nn.ParamSet(dims=params.dims, theta=theta, phi=params.phi)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, cfg.finetune_steps + 1):
            rng = streams.stream(cfg.seed, *key_prefix, t)
            loss, _, _, grads, _ = _combined_loss(batch, labels, adapted, cfg, rng)
            if not np.isfinite(loss):
                if on_divergence == "stop":
                    log.warning("fine-tuning diverged at step %d; keeping step %d parameters",
                                t, t - 1)
                    break
                raise EpisodeAbort(f"non-finite fine-tuning loss at step {t}: {loss!r}")
            if cfg.finetune_lr != 0.0:
                adapted.theta = {k: adapted.theta[k] - cfg.finetune_lr * grads[k] for k in theta}
    return adapted


def meta_step(
    params: nn.ParamSet,
    task: MetaTask,
    g: Graph,
    cfg: TrainConfig,
    episode: int,
    candidate_mask: np.ndarray | None = None,
) -> tuple[nn.ParamSet, EpisodeRecord]:
    """One episode: augment, adapt, and meta-update both groups."""
    rng_subgraph = streams.stream(cfg.seed, streams.TRAIN_SUBGRAPH, episode)
    entries, precision = _augmented_entries(g, task, cfg, rng_subgraph, candidate_mask)

    adapted = fine_tune(params, g, entries, cfg, (streams.TRAIN_FINETUNE, episode))

    rng_meta = streams.stream(cfg.seed, streams.TRAIN_META, episode)
    q_nodes = task.query_nodes()
    q_labels = np.asarray([y for _, y in task.query])
    store = ib.store_for(g)
    q_batch = ib.batch_egos(store, q_nodes)

    with np.errstate(over="ignore", invalid="ignore"):
        total, ly, ld, g_theta, g_phi = _combined_loss(q_batch, q_labels, adapted, cfg, rng_meta)
    if not np.isfinite(total):
        raise EpisodeAbort(f"non-finite query loss in episode {episode}: {total!r}")

    if cfg.meta_lr != 0.0:
        new_theta = {k: params.theta[k] - cfg.meta_lr * g_theta[k] for k in params.theta}
    else:
        new_theta = params.theta
    if cfg.uses_ib() and cfg.target_lr != 0.0:
        new_phi = {k: params.phi[k] - cfg.target_lr * g_phi[k] for k in params.phi}
    else:
        new_phi = params.phi

    predictions = np.argmax(ib.predict_scores_batch(adapted.theta, q_batch), axis=1)
    query_acc = float(np.mean(predictions == q_labels))

    record = EpisodeRecord(
        episode=episode,
        support_size=len(entries),
        pseudo_precision=precision,
        loss_y=ly,
        loss_d=ld,
        loss=total,
        query_acc=query_acc,
    )
    return nn.ParamSet(dims=params.dims, theta=new_theta, phi=new_phi), record


@dataclass
class TrainResult:
    params: nn.ParamSet
    records: list[EpisodeRecord] = field(default_factory=list)
    val_reports: list[tuple[int, "EvalReport"]] = field(default_factory=list)


def train(
    g: Graph,
    cfg: TrainConfig,
    *,
    params: nn.ParamSet | None = None,
    checkpoint_hook=None,
) -> TrainResult:
    """Run the full episodic loop; deterministic in (graph, config, seed).

    `checkpoint_hook(episode, params)` fires every `checkpoint_interval`
    episodes when the interval is positive. Sampling failures skip the
    episode; the run only stops early if parameters go non-finite.
    """
    cfg.validate()
    pool = build_pool(g, cfg.labels_per_class, cfg.seed)
    if params is None:
        params = init_for_graph(g, cfg)
    candidate_mask = propagation_candidate_mask(g, cfg)
    result = TrainResult(params=params)

    for episode in range(cfg.train_episodes):
        rng_task = streams.stream(cfg.seed, streams.TRAIN_TASK, episode)
        try:
            task = sample_train_task(pool, cfg.n_way, cfg.k_shot, cfg.query_size, rng_task)
        except EpisodeError as exc:
            log.warning("episode %d skipped: %s", episode, exc)
            continue
        try:
            params, record = meta_step(params, task, g, cfg, episode, candidate_mask)
        except EpisodeAbort as exc:
            log.warning("episode %d aborted: %s", episode, exc)
            continue
        for group in (params.theta, params.phi):
            for name, tensor in group.items():
                if not np.all(np.isfinite(tensor)):
                    raise RuntimeError(
                        f"parameter {name} went non-finite after episode {episode}"
                    )
        result.params = params
        result.records.append(record)
        if checkpoint_hook and cfg.checkpoint_interval > 0 and (
            (episode + 1) % cfg.checkpoint_interval == 0
        ):
            checkpoint_hook(episode + 1, params)
        if cfg.val_interval > 0 and (episode + 1) % cfg.val_interval == 0:
            report = evaluate(g, params, cfg, split="val", n_tasks=cfg.val_tasks)
            result.val_reports.append((episode + 1, report))
            log.info("episode %d: val accuracy %.4f ± %.4f", episode + 1, report.mean, report.std)
    return result


def _eval_task(g, params, cfg, classes, index, phase_task, phase_sub, phase_ft):
    rng_task = streams.stream(cfg.seed, phase_task, index)
    task = sample_task_from_classes(g, classes, cfg.n_way, cfg.k_shot, cfg.query_size, rng_task)
    rng_sub = streams.stream(cfg.seed, phase_sub, index)
    entries, _ = _augmented_entries(g, task, cfg, rng_sub, None)
    adapted = fine_tune(params, g, entries, cfg, (phase_ft, index), on_divergence="stop")
    q_batch = ib.batch_egos(ib.store_for(g), task.query_nodes())
    with np.errstate(over="ignore", invalid="ignore"):
        scores = ib.predict_scores_batch(adapted.theta, q_batch)
    predictions = np.argmax(np.nan_to_num(scores, nan=-np.inf), axis=1)
    q_labels = np.asarray([y for _, y in task.query])
    return float(np.mean(predictions == q_labels))


def evaluate(
    g: Graph,
    params: nn.ParamSet,
    cfg: TrainConfig,
    *,
    split: str = "test",
    n_tasks: int | None = None,
) -> EvalReport:
    """Fine-tune-and-classify over sampled tasks of a class split.

    The input parameters are copied per task and never mutated. Tasks are
    independent given their index, so results do not depend on the worker
    count; per-task accuracies are reduced in index order.
    """
    cfg.validate()
    classes = g.class_splits[split]
    if split == "val":
        phases = (streams.VAL_TASK, streams.VAL_SUBGRAPH, streams.VAL_FINETUNE)
    else:
        phases = (streams.EVAL_TASK, streams.EVAL_SUBGRAPH, streams.EVAL_FINETUNE)
    count = cfg.test_tasks if n_tasks is None else n_tasks
    start = time.perf_counter()

    def run(i):
        return _eval_task(g, params, cfg, classes, i, *phases)

    if cfg.workers > 1 and count > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            per_task = list(pool.map(run, range(count)))
    else:
        per_task = [run(i) for i in range(count)]

    arr = np.asarray(per_task) if per_task else np.zeros(0)
    return EvalReport(
        per_task=[float(a) for a in per_task],
        mean=float(arr.mean()) if len(arr) else 0.0,
        std=float(arr.std()) if len(arr) else 0.0,
        seed=cfg.seed,
        config=cfg.to_dict(),
        wall_clock_s=time.perf_counter() - start,
    )


def poisson_only_baseline(
    g: Graph, task: MetaTask, cfg: TrainConfig, rng: np.random.Generator
) -> float:
    """Parameter-free diagnostic: classify query nodes straight from the
    propagated scores after injecting them into the task subgraph."""
    q_nodes = task.query_nodes()
    sub = assemble_subgraph(
        g, task, cfg.random_nodes, rng, include_nodes=q_nodes
    )
    sub.a_feat = feature_affinity(
        g.features[sub.node_ids], cfg.affinity_scale, normalize=cfg.normalize_features
    )
    sub.a_combined = combine_adjacency(sub.a_struct, sub.a_feat, cfg.structure_weight)
    scores = poisson_iterate(sub.a_combined, sub.sources, cfg.propagation_steps)
    position = {int(v): i for i, v in enumerate(sub.node_ids)}
    hits = 0
    for node, label in task.query:
        hits += int(np.argmax(scores[position[node]]) == label)
    return hits / len(task.query)


def gradient_audit(
    seed: int = 0,
    eps: float = 1e-5,
    coords_per_tensor: int = 200,
    *,
    ego_size: int = 12,
    feature_dim: int = 16,
    n_classes: int = 5,
    hidden: int = 64,
    predictor_hidden: int = 128,
) -> dict[str, float]:
    """Finite-difference audit of every loss path on a seeded ego fixture.

    Returns the worst relative error per path ("loss_y", "loss_d",
    "loss_total"); each path differentiates both parameter groups, so a
    frozen group's zero gradient is verified too.
    """
    rng = np.random.default_rng(seed)
    adj = (rng.random((ego_size, ego_size)) < 0.4).astype(np.float64)
    adj = np.triu(adj, k=1)
    adj = adj + adj.T
    from .graphs import EgoSubgraph

    ego = EgoSubgraph(
        center=0,
        global_ids=np.arange(ego_size, dtype=np.int64),
        adjacency=adj,
        features=rng.standard_normal((ego_size, feature_dim)),
    )
    batch = ib.batch_from_egos([ego])
    labels = np.asarray([int(rng.integers(n_classes))])
    params = nn.init_params(feature_dim, hidden, predictor_hidden, n_classes, seed + 1)

    def split(flat):
        theta = {k: flat["theta/" + k] for k in nn.THETA_KEYS}
        phi = {k: flat["phi/" + k] for k in nn.PHI_KEYS}
        return theta, phi

    def with_phi_zeros(grads_theta, phi):
        out = {"theta/" + k: v for k, v in grads_theta.items()}
        out.update({"phi/" + k: np.zeros_like(v) for k, v in phi.items()})
        return out

    def path_y(flat):
        theta, phi = split(flat)
        loss, grads = ib.loss_y_batch(
            batch, labels, theta, dropout=0.5, train=True, rng=streams.stream(seed, 90)
        )
        return loss, with_phi_zeros(grads, phi)

    def path_d(flat):
        theta, phi = split(flat)
        loss, g_theta, g_phi = ib.loss_d_batch(
            batch, theta, phi, mask_rate=0.1, dropout=0.5, train=True,
            rng=streams.stream(seed, 91),
        )
        out = {"theta/" + k: v for k, v in g_theta.items()}
        out.update({"phi/" + k: v for k, v in g_phi.items()})
        return loss, out

    def path_total(flat):
        theta, phi = split(flat)
        total, _, _, g_theta, g_phi = ib.loss_total_batch(
            batch, labels, theta, phi, ib_weight=1.0, mask_rate=0.1,
            dropout=0.5, train=True, rng=streams.stream(seed, 92),
        )
        out = {"theta/" + k: v for k, v in g_theta.items()}
        out.update({"phi/" + k: v for k, v in g_phi.items()})
        return total, out

    flat = {"theta/" + k: v for k, v in params.theta.items()}
    flat.update({"phi/" + k: v for k, v in params.phi.items()})
    return {
        "loss_y": nn.grad_check(path_y, flat, eps=eps, coords_per_tensor=coords_per_tensor, seed=seed),
        "loss_d": nn.grad_check(path_d, flat, eps=eps, coords_per_tensor=coords_per_tensor, seed=seed),
        "loss_total": nn.grad_check(path_total, flat, eps=eps, coords_per_tensor=coords_per_tensor, seed=seed),
    }
