"""Selective replay for temporal graph continual learning.

Subpackages: :mod:`tgcl.graph` (data model and generation),
:mod:`tgcl.backbone` (embedding model), :mod:`tgcl.kernels` (RBF/MMD),
:mod:`tgcl.selector` (subset selection), :mod:`tgcl.trainer` (per-period
training and strategies), :mod:`tgcl.metrics` (AP/AF), and
:mod:`tgcl.harness` (experiment orchestration).
"""

__version__ = "0.1.0"

from .graph import (
    Event,
    NodeRecord,
    PeriodSpec,
    PeriodView,
    SynthConfig,
    TemporalGraph,
    generate_synthetic,
    load_graph,
    save_graph,
    split_period,
)
from .kernels import KernelParams, kernel_bound_check, j_mmd, median_heuristic_gamma, mmd_sq, rbf
from .backbone import Backbone, NodeContext, Snapshot, classify, embed, loss_and_grads, snapshot
from .selector import ReplayBuffer, SelectionConfig, baseline_select, brute_force_select, select
from .trainer import TrainConfig, l_dst, run_strategy, train_period
from .metrics import RunRecord, af, ap, precision_per_set, time_per_epoch

__all__ = [
    "Event",
    "NodeRecord",
    "PeriodSpec",
    "PeriodView",
    "SynthConfig",
    "TemporalGraph",
    "generate_synthetic",
    "load_graph",
    "save_graph",
    "split_period",
    "KernelParams",
    "kernel_bound_check",
    "j_mmd",
    "median_heuristic_gamma",
    "mmd_sq",
    "rbf",
    "Backbone",
    "NodeContext",
    "Snapshot",
    "classify",
    "embed",
    "loss_and_grads",
    "snapshot",
    "ReplayBuffer",
    "SelectionConfig",
    "baseline_select",
    "brute_force_select",
    "select",
    "TrainConfig",
    "l_dst",
    "run_strategy",
    "train_period",
    "RunRecord",
    "af",
    "ap",
    "precision_per_set",
    "time_per_epoch",
]
