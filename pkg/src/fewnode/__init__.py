"""Few-shot node classification from weakly labeled graphs.

Pipeline: sample N-way K-shot episodes from a tiny labeled pool, expand
each support set with Poisson-propagated pseudo-labels over a hybrid
structure/feature subgraph, fine-tune a small graph encoder under a
classification + view-agreement objective, and meta-optimize the two
parameter groups across episodes with separate learning rates.
"""

from .episodes import MetaTask, WeakLabelPool, build_pool, sample_test_task, sample_train_task
from .graphs import (
    EgoSubgraph,
    Graph,
    GraphFormatError,
    dump_graph,
    ego_subgraph,
    generate_sbm,
    k_hop_neighbors,
    load_graph,
)
from .nn import ParamSet, init_params, load_params, save_params
from .propagation import (
    AugmentedSupport,
    PoissonSubgraph,
    PseudoLabel,
    augment_support,
    poisson_iterate,
)
from .training import (
    EvalReport,
    TrainConfig,
    evaluate,
    fine_tune,
    gradient_audit,
    meta_step,
    poisson_only_baseline,
    train,
)

__all__ = [
    "AugmentedSupport",
    "EgoSubgraph",
    "EvalReport",
    "Graph",
    "GraphFormatError",
    "MetaTask",
    "ParamSet",
    "PoissonSubgraph",
    "PseudoLabel",
    "TrainConfig",
    "WeakLabelPool",
    "augment_support",
    "build_pool",
    "dump_graph",
    "ego_subgraph",
    "evaluate",
    "fine_tune",
    "generate_sbm",
    "gradient_audit",
    "init_params",
    "k_hop_neighbors",
    "load_graph",
    "load_params",
    "meta_step",
    "poisson_iterate",
    "poisson_only_baseline",
    "sample_test_task",
    "sample_train_task",
    "save_params",
    "train",
]

__version__ = "0.1.0"
