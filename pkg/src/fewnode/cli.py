"""Command-line surface: dataset synthesis, training, evaluation, audits.

Every command is batch-style: flags > config file > defaults, the
resolved configuration is echoed beside the outputs, and all artifacts
are plain JSON/CSV. Exit codes: 0 success, 1 runtime failure, 2 usage or
config-schema error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import rng as streams
from .episodes import EpisodeError, build_pool, sample_test_task, sample_train_task
from .graphs import GraphFormatError, dump_graph_dir, generate_sbm, load_graph_dir
from .nn import load_params, save_params
from .propagation import PropagationError, augment_support
from .training import (
    ConfigError,
    TrainConfig,
    evaluate,
    gradient_audit,
    init_for_graph,
    propagation_candidate_mask,
    train,
)

log = logging.getLogger(__name__)

_CONFIG_FLOAT_FIELDS = {
    f.name for f in dataclasses.fields(TrainConfig) if isinstance(getattr(TrainConfig(), f.name), float)
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    grp = parser.add_argument_group("configuration overrides")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(TrainConfig(), f.name)
        if isinstance(default, bool):
            grp.add_argument(flag, default=None, action=argparse.BooleanOptionalAction)
        elif isinstance(default, int):
            grp.add_argument(flag, type=int, default=None)
        elif isinstance(default, float):
            grp.add_argument(flag, type=float, default=None)
        else:
            grp.add_argument(flag, type=str, default=None)


def _resolve_config(args) -> tuple[TrainConfig, dict]:
    """Merge defaults, the optional config file, and explicit flags."""
    payload: dict = {}
    extras: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                file_payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(file_payload, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        for key in ("data", "out"):
            if key in file_payload:
                extras[key] = file_payload.pop(key)
        payload.update(file_payload)
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            payload[f.name] = value
    cfg = TrainConfig.from_dict(payload)
    for key in ("data", "out"):
        flag = getattr(args, key, None)
        if flag is not None:
            extras[key] = flag
    if "out" not in extras and os.environ.get("FEWNODE_OUT"):
        extras["out"] = os.environ["FEWNODE_OUT"]
    return cfg, extras


def _require(extras: dict, key: str) -> str:
    if not extras.get(key):
        raise ConfigError(f"missing required field: {key}")
    return extras[key]


def _write_resolved(out_dir: str, cfg: TrainConfig, extras: dict) -> None:
    payload = dict(cfg.to_dict())
    payload.update(extras)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_episode_log(path: str, records) -> None:
    with open(path, "w") as fh:
        fh.write("episode,support_size,pseudo_precision,loss_y,loss_d,loss,query_acc\n")
        for r in records:
            prec = "" if r.pseudo_precision is None else repr(r.pseudo_precision)
            fh.write(
                f"{r.episode},{r.support_size},{prec},"
                f"{r.loss_y!r},{r.loss_d!r},{r.loss!r},{r.query_acc!r}\n"
            )


def cmd_gen_data(args) -> int:
    split_counts = None
    if args.split_counts:
        parts = [int(tok) for tok in args.split_counts.split(",")]
        if len(parts) != 3:
            raise ConfigError("--split-counts expects three comma-separated counts")
        split_counts = (parts[0], parts[1], parts[2])
    g = generate_sbm(
        classes=args.classes,
        nodes_per_class=args.nodes_per_class,
        p_in=args.p_in,
        p_out=args.p_out,
        feature_dim=args.feature_dim,
        noise_std=args.noise_std,
        seed=args.seed,
        split_counts=split_counts,
    )
    dump_graph_dir(g, args.out)
    splits = {k: len(v) for k, v in g.class_splits.items()}
    print(
        f"wrote {args.out}: {g.num_nodes} nodes, {g.num_edges} edges, "
        f"feature_dim={g.feature_dim}, class splits {splits}"
    )
    return 0


def cmd_train(args) -> int:
    cfg, extras = _resolve_config(args)
    data_dir = _require(extras, "data")
    out_dir = _require(extras, "out")
    os.makedirs(out_dir, exist_ok=True)
    g = load_graph_dir(data_dir)
    _write_resolved(out_dir, cfg, {"data": data_dir, "out": out_dir})

    def checkpoint_hook(episode, params):
        save_params(os.path.join(out_dir, f"checkpoint_ep{episode:06d}.bin"), params)

    result = train(g, cfg, checkpoint_hook=checkpoint_hook)
    save_params(os.path.join(out_dir, "checkpoint_final.bin"), result.params)
    _write_episode_log(os.path.join(out_dir, "episodes.csv"), result.records)
    if result.val_reports:
        with open(os.path.join(out_dir, "val.csv"), "w") as fh:
            fh.write("episode,mean,std\n")
            for episode, report in result.val_reports:
                fh.write(f"{episode},{report.mean!r},{report.std!r}\n")
    if result.records:
        tail = result.records[-min(50, len(result.records)):]
        acc = sum(r.query_acc for r in tail) / len(tail)
        print(f"trained {len(result.records)} episodes; trailing query accuracy {acc:.4f}")
    else:
        print("trained 0 episodes")
    return 0


def cmd_eval(args) -> int:
    cfg, extras = _resolve_config(args)
    data_dir = _require(extras, "data")
    g = load_graph_dir(data_dir)
    params = load_params(args.checkpoint)
    if params.dims.features != g.feature_dim:
        raise RuntimeError(
            f"checkpoint expects feature_dim={params.dims.features}, graph has {g.feature_dim}"
        )
    if params.dims.n_classes != cfg.n_way:
        raise RuntimeError(
            f"checkpoint classifies {params.dims.n_classes} ways, config requests {cfg.n_way}"
        )
    report = evaluate(g, params, cfg, split=args.split)
    payload = report.to_dict()
    if args.report:
        os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
        with open(args.report, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"{args.split} accuracy over {len(report.per_task)} tasks: "
          f"{report.mean:.4f} ± {report.std:.4f}")
    return 0


def cmd_propagate(args) -> int:
    cfg, extras = _resolve_config(args)
    data_dir = _require(extras, "data")
    g = load_graph_dir(data_dir)
    index = args.task_index
    if args.split == "train":
        pool = build_pool(g, cfg.labels_per_class, cfg.seed)
        rng_task = streams.stream(cfg.seed, streams.TRAIN_TASK, index)
        task = sample_train_task(pool, cfg.n_way, cfg.k_shot, cfg.query_size, rng_task)
        rng_sub = streams.stream(cfg.seed, streams.TRAIN_SUBGRAPH, index)
        mask = propagation_candidate_mask(g, cfg)
    else:
        rng_task = streams.stream(cfg.seed, streams.EVAL_TASK, index)
        task = sample_test_task(g, cfg.n_way, cfg.k_shot, cfg.query_size, rng_task)
        rng_sub = streams.stream(cfg.seed, streams.EVAL_SUBGRAPH, index)
        mask = None
    result = augment_support(
        g, task, rng_sub,
        r_random=cfg.random_nodes,
        pseudo_count=cfg.pseudo_count,
        steps=cfg.propagation_steps,
        affinity_scale=cfg.affinity_scale,
        structure_weight=cfg.structure_weight,
        normalize_features=cfg.normalize_features,
        candidate_mask=mask,
    )
    payload = {
        "task": {
            "class_ids": list(task.class_ids),
            "support": [[v, y] for v, y in task.support],
            "query": [[v, y] for v, y in task.query],
        },
        "node_ids": [int(v) for v in result.subgraph.node_ids],
        "num_support": result.subgraph.num_support,
        "scores": [[float(x) for x in row] for row in result.scores],
        "entropy": [float(x) for x in result.entropy],
        "selected": [
            {"node": p.node, "label": p.local_label, "entropy": p.entropy}
            for p in result.pseudo
        ],
        "augmented_size": len(result.augmented.entries),
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out_json:
        with open(args.out_json, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out_json}: subgraph of {len(payload['node_ids'])} nodes, "
              f"{len(payload['selected'])} pseudo-labels")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradient_audit(seed=args.seed, eps=args.eps, coords_per_tensor=args.coords)
    failed = False
    for path, err in errors.items():
        status = "PASS" if err < args.tolerance else "FAIL"
        failed |= status == "FAIL"
        print(f"{path}: max_rel_err={err:.3e} {status}")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg, extras = _resolve_config(args)
    data_dir = _require(extras, "data")
    out_dir = _require(extras, "out")
    os.makedirs(out_dir, exist_ok=True)
    g = load_graph_dir(data_dir)
    _write_resolved(out_dir, cfg, {"data": data_dir, "out": out_dir})
    rows = []
    for mode in ("full", "no_pseudo", "no_ib", "neither"):
        mode_cfg = dataclasses.replace(cfg, ablation=mode)
        result = train(g, mode_cfg)
        report = evaluate(g, result.params, mode_cfg)
        rows.append((mode, report.mean, report.std))
        print(f"{mode}: {report.mean:.4f} ± {report.std:.4f}")
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write("mode,mean,std\n")
        for mode, mean, std in rows:
            fh.write(f"{mode},{mean!r},{std!r}\n")
    return 0


_SWEEP_AXES = {
    "mask-rate": ("mask_rate", float, "accuracy"),
    "ib-weight": ("ib_weight", float, "accuracy"),
    "structure-weight": ("structure_weight", float, "pseudo_precision"),
    "random-nodes": ("random_nodes", int, "pseudo_precision"),
}


def _pseudo_precision_metric(g, cfg: TrainConfig, tasks: int) -> float:
    """Mean precision of the selected pseudo-labels over sampled pool tasks."""
    pool = build_pool(g, cfg.labels_per_class, cfg.seed)
    mask = propagation_candidate_mask(g, cfg)
    scores = []
    for i in range(tasks):
        task = sample_train_task(
            pool, cfg.n_way, cfg.k_shot, cfg.query_size,
            streams.stream(cfg.seed, streams.BASELINE, i, 0),
        )
        result = augment_support(
            g, task, streams.stream(cfg.seed, streams.BASELINE, i, 1),
            r_random=cfg.random_nodes,
            pseudo_count=cfg.pseudo_count,
            steps=cfg.propagation_steps,
            affinity_scale=cfg.affinity_scale,
            structure_weight=cfg.structure_weight,
            normalize_features=cfg.normalize_features,
            candidate_mask=mask,
        )
        if not result.pseudo:
            continue
        hits = sum(
            1 for p in result.pseudo if g.labels[p.node] == task.class_ids[p.local_label]
        )
        scores.append(hits / len(result.pseudo))
    return float(np.mean(scores)) if scores else 0.0


def cmd_sweep(args) -> int:
    cfg, extras = _resolve_config(args)
    data_dir = _require(extras, "data")
    out_dir = _require(extras, "out")
    os.makedirs(out_dir, exist_ok=True)
    g = load_graph_dir(data_dir)
    field, cast, metric_kind = _SWEEP_AXES[args.axis]
    values = [cast(float(tok)) for tok in args.values.split(",")]
    rows = []
    for value in values:
        point = dataclasses.replace(cfg, **{field: value})
        if metric_kind == "accuracy":
            result = train(g, point)
            metric = evaluate(g, result.params, point).mean
        else:
            metric = _pseudo_precision_metric(g, point, args.sweep_tasks)
        rows.append((value, metric))
        print(f"{args.axis}={value}: {metric_kind}={metric:.4f}")
    path = os.path.join(out_dir, f"sweep_{field}.csv")
    with open(path, "w") as fh:
        fh.write(f"{field},{metric_kind}\n")
        for value, metric in rows:
            fh.write(f"{value!r},{metric!r}\n")
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewnode",
        description="Few-shot node classification with Poisson pseudo-labeling "
                    "and bottleneck fine-tuning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a block-model dataset")
    p.add_argument("--classes", type=int, default=15)
    p.add_argument("--nodes-per-class", type=int, default=40)
    p.add_argument("--p-in", type=float, default=0.1)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--noise-std", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-counts", type=str, default=None,
                   help="train,val,test class counts (default: even thirds)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    def common(p, with_out=True):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--data", type=str, default=None, help="dataset directory")
        if with_out:
            p.add_argument("--out", type=str, default=None, help="output directory")
        _add_config_flags(p)

    p = sub.add_parser("train", help="run episodic meta-training")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on sampled tasks")
    common(p, with_out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--report", type=str, default=None, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("propagate", help="dump propagation artifacts for one task")
    common(p, with_out=False)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--task-index", type=int, default=0)
    p.add_argument("--out-json", type=str, default=None)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate all ablation modes")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one hyperparameter, emit plot data")
    common(p)
    p.add_argument("--axis", choices=sorted(_SWEEP_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--sweep-tasks", type=int, default=20,
                   help="tasks per point for pseudo-precision metrics")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GraphFormatError, EpisodeError, PropagationError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
