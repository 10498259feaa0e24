"""Per-period continual training and strategy orchestration.

The per-period objective is ``CE(new) + CE(replayed subset) + beta *
alignment``, where the alignment term pulls the live embeddings of the
rehearsal subset toward frozen embeddings of the anchor subset (gradients
are stopped on the anchor side). Strategies:

* ``joint``    - train on all of the period's data (reference, slowest)
* ``finetune`` - new classes only (fastest, forgets)
* ``er``       - replay a random class-balanced subset of current old data
* ``icarl``    - replay a herding-selected subset
* ``ltf``      - replay the greedy error+distribution subset, optionally
  with the alignment term (ablation ``both_plus_ldst``)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from time import perf_counter
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .backbone import (
    Backbone,
    Model,
    Snapshot,
    NodeContext,
    build_contexts,
    build_inputs,
    embed_batch,
    embedding_grads,
    classify_batch,
    loss_and_grads_from_inputs,
    snapshot,
)
from .graph import TRAIN, VAL, TEST, PeriodView, TemporalGraph, split_period
from .kernels import KernelParams
from .metrics import ap as ap_metric
from .metrics import precision_per_set
from .selector import (
    ReplayBuffer,
    SelectionConfig,
    baseline_select,
    select,
)

STRATEGIES = ("joint", "finetune", "er", "icarl", "ltf")
REPLAY_STRATEGIES = ("er", "icarl", "ltf")
ABLATIONS = ("err_only", "dist_only", "both", "both_plus_ldst")
SIM_REFRESH = ("epoch", "step")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.5
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 600
    patience: int = 20
    seed: int = 0
    strategy: str = "ltf"
    ablation: str = "both_plus_ldst"
    sim_refresh: str = "epoch"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.sim_refresh not in SIM_REFRESH:
            raise ValueError(f"unknown sim_refresh {self.sim_refresh!r}")


def ablation_terms(ablation: str) -> tuple[str, ...]:
    """Selection score terms active under an ablation setting."""
    if ablation == "err_only":
        return ("err",)
    if ablation == "dist_only":
        return ("dist",)
    return ("err", "dist")


# ---------------------------------------------------------------------------
# Alignment loss (anchor side frozen)
# ---------------------------------------------------------------------------

def l_dst_terms(
    sub_emb: np.ndarray, sim_emb: np.ndarray, kp: KernelParams
) -> tuple[float, np.ndarray]:
    """Negated kernel cross term and its gradient w.r.t. the live side.

    Value is ``-s * sum k(v, u)`` with ``s = 2/(|sub| |sim|)``; adding the
    two kernel self-terms reconstitutes the squared MMD between the sets.
    The anchor embeddings are treated as constants, so gradients flow only
    through ``sub_emb``.
    """
    sub = np.atleast_2d(np.asarray(sub_emb, dtype=float))
    sim = np.atleast_2d(np.asarray(sim_emb, dtype=float))
    if sub.shape[0] == 0 or sim.shape[0] == 0:
        raise ValueError("alignment loss requires nonempty subsets on both sides")
    s = 2.0 / (sub.shape[0] * sim.shape[0])
    if kp.squared:
        k = np.exp(-kp.gamma * cdist(sub, sim, "sqeuclidean"))
        value = -s * float(k.sum())
        grad = s * 2.0 * kp.gamma * (sub * k.sum(axis=1, keepdims=True) - k @ sim)
    else:
        d = cdist(sub, sim, "euclidean")
        k = np.exp(-kp.gamma * d)
        w = np.where(d > 0.0, k / np.where(d > 0.0, d, 1.0), 0.0)
        value = -s * float(k.sum())
        grad = s * kp.gamma * (sub * w.sum(axis=1, keepdims=True) - w @ sim)
    return value, grad


def l_dst(
    model: Model,
    sub_ctxs: Sequence[NodeContext],
    sim_embeddings: np.ndarray,
    kp: KernelParams,
) -> tuple[float, dict[str, np.ndarray]]:
    """Alignment loss for live contexts, with gradients w.r.t. the model."""
    if not sub_ctxs:
        raise ValueError("alignment loss requires nonempty subsets on both sides")
    z = build_inputs(sub_ctxs)
    emb = embed_batch(model, z)
    value, d_emb = l_dst_terms(emb, sim_embeddings, kp)
    return value, embedding_grads(model, z, d_emb)


# ---------------------------------------------------------------------------
# One period of training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_ap: float = 0.0
    epochs_ran: int = 0


def _node_inputs(graph: TemporalGraph, view: PeriodView, ids: Sequence[int], model: Model):
    eval_time = graph.period(view.period_index).t_end
    z = build_inputs(build_contexts(graph, ids, eval_time))
    y = np.array([model.class_index(graph.nodes[v].class_id) for v in ids], dtype=int)
    return z, y


def _sum_grads(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


def train_period(
    model: Backbone,
    graph: TemporalGraph,
    view: PeriodView,
    buffer: ReplayBuffer | None,
    cfg: TrainConfig,
    kp: KernelParams | None = None,
) -> TrainResult:
    """Minimize the period objective by seeded mini-batch descent.

    Every step pairs one batch of the main data with one cyclically
    upsampled batch of the replay subset (when present); validation AP over
    all classes seen so far drives early stopping, and the returned model
    carries the best-validation parameters, not the last ones.
    """
    n = view.period_index
    replay = cfg.strategy in REPLAY_STRATEGIES
    if buffer is not None:
        if not replay:
            raise ValueError(f"strategy {cfg.strategy!r} does not use a replay buffer")
        if buffer.period_built != n:
            raise ValueError(
                f"buffer was built for period {buffer.period_built}, training period {n}"
            )
    if replay and buffer is None and view.old_nodes:
        raise ValueError(f"strategy {cfg.strategy!r} requires a replay buffer at period {n}")

    new_train = view.nodes_of("new", TRAIN)
    if not new_train:
        raise ValueError(f"period {n} has no new-class training nodes")
    if cfg.strategy == "joint":
        main_ids = tuple(sorted(view.nodes_of("old", TRAIN) + new_train))
    else:
        main_ids = new_train

    z_main, y_main = _node_inputs(graph, view, main_ids, model)
    n_main = len(main_ids)

    replay_active = replay and buffer is not None and buffer.sub
    if replay_active:
        sub_ids = buffer.sub_ids
        z_sub, y_sub = _node_inputs(graph, view, sub_ids, model)
        n_sub = len(sub_ids)
    use_ldst = (
        replay_active
        and cfg.strategy == "ltf"
        and cfg.ablation == "both_plus_ldst"
        and cfg.beta > 0
        and bool(buffer.sim)
    )
    if use_ldst:
        if kp is None:
            raise ValueError("alignment loss needs kernel parameters")
        z_sim, _ = _node_inputs(graph, view, buffer.sim, model)

    # validation contexts, grouped into class sets for the AP early stop
    val_ids = view.nodes_of("all", VAL)
    z_val = build_inputs(
        build_contexts(graph, val_ids, graph.period(n).t_end)
    ) if val_ids else None
    val_labels = np.array([graph.nodes[v].class_id for v in val_ids], dtype=int)
    set_masks = []
    for i in range(1, n + 1):
        cs = set(graph.period(i).classes)
        mask = np.array([y in cs for y in val_labels], dtype=bool)
        if mask.any():
            set_masks.append(mask)
    if not set_masks:
        warnings.warn(f"period {n} has no validation nodes; early stopping is inert", stacklevel=2)

    rng = np.random.default_rng((cfg.seed, n))
    result = TrainResult()
    best_params = model.parameters()
    best_ap = -np.inf
    best_epoch = -1

    for epoch in range(cfg.epochs):
        t0 = perf_counter()
        if use_ldst and cfg.sim_refresh == "epoch":
            sim_emb = embed_batch(model, z_sim)
        perm = rng.permutation(n_main)
        if replay_active:
            sub_perm = rng.permutation(n_sub)
            sub_ptr = 0

        acc_new = acc_sub = acc_ldst = acc_tot = 0.0
        steps = 0
        for start in range(0, n_main, cfg.batch_size):
            bidx = perm[start : start + cfg.batch_size]
            loss_new, grads = loss_and_grads_from_inputs(model, z_main[bidx], y_main[bidx])
            step_tot = loss_new
            ce_sub = 0.0
            raw_ldst = 0.0
            if replay_active:
                take = min(cfg.batch_size, n_sub)
                sidx = sub_perm[(sub_ptr + np.arange(take)) % n_sub]
                sub_ptr = (sub_ptr + take) % n_sub
                aux = None
                if use_ldst:
                    if cfg.sim_refresh == "step":
                        sim_emb = embed_batch(model, z_sim)
                    cell: list[float] = []

                    def aux(e, _sim=sim_emb, _cell=cell):
                        val, g = l_dst_terms(e, _sim, kp)
                        _cell.append(val)
                        return cfg.beta * val, cfg.beta * g

                loss_sub, g_sub = loss_and_grads_from_inputs(model, z_sub[sidx], y_sub[sidx], aux=aux)
                if use_ldst:
                    raw_ldst = cell[0]
                ce_sub = loss_sub - cfg.beta * raw_ldst
                grads = _sum_grads(grads, g_sub)
                step_tot += loss_sub
            if not np.isfinite(step_tot):
                raise FloatingPointError(f"non-finite loss at period {n} epoch {epoch}")
            model.apply_gradients(grads, cfg.lr)
            acc_new += loss_new
            acc_sub += ce_sub
            acc_ldst += raw_ldst
            acc_tot += step_tot
            steps += 1

        val_ap = _validation_ap(model, z_val, val_labels, set_masks)
        wall_ms = (perf_counter() - t0) * 1000.0
        result.log.append(
            {
                "period": n,
                "epoch": epoch,
                "loss_new": acc_new / steps,
                "loss_sub": acc_sub / steps,
                "l_dst": acc_ldst / steps,
                "l_tot": acc_tot / steps,
                "val_ap": val_ap,
                "wall_ms": wall_ms,
            }
        )
        if val_ap > best_ap:
            best_ap = val_ap
            best_epoch = epoch
            best_params = model.parameters()
        if epoch - best_epoch >= cfg.patience:
            break

    model.set_parameters(best_params)
    result.best_epoch = max(best_epoch, 0)
    result.best_val_ap = float(best_ap) if np.isfinite(best_ap) else 0.0
    result.epochs_ran = len(result.log)
    return result


def _validation_ap(model, z_val, val_labels, set_masks) -> float:
    if z_val is None or not set_masks:
        return 0.0
    probs = classify_batch(model, z_val)
    preds = np.array([model.classes[i] for i in probs.argmax(axis=1)])
    accs = [float(np.mean(preds[m] == val_labels[m])) for m in set_masks]
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# Full multi-period runs
# ---------------------------------------------------------------------------

@dataclass
class PeriodOutcome:
    period: int
    precisions: list[float | None]
    ap: float
    epoch_log: list[dict]
    selection_ms: float
    epochs_ran: int
    best_epoch: int
    buffer: ReplayBuffer | None = None
    model_snapshot: Snapshot | None = None


def run_strategy(
    graph: TemporalGraph,
    strategy: str,
    sel_cfg: SelectionConfig,
    train_cfg: TrainConfig,
    split_seed: int = 0,
    hidden_dim: int = 64,
    keep_snapshots: bool = False,
    kernel_squared: bool = False,
) -> list[PeriodOutcome]:
    """Run one strategy over all periods and score each period's test split.

    Replay buffers are always built from the *current* period's old-class
    data, scored by the model snapshot frozen at the end of the previous
    period. Selection wall time is recorded separately from epoch time.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    cfg = replace(train_cfg, strategy=strategy)
    feature_dim = next(iter(graph.nodes.values())).feature.shape[0]
    model = Backbone(feature_dim, hidden_dim=hidden_dim, seed=cfg.seed)

    prev: Snapshot | None = None
    outcomes: list[PeriodOutcome] = []
    for n in range(1, graph.num_periods + 1):
        view = split_period(graph, n, split_seed)
        model.grow_head(sorted(graph.period(n).classes))

        buffer: ReplayBuffer | None = None
        kp: KernelParams | None = None
        sel_ms = 0.0
        if n >= 2 and strategy in REPLAY_STRATEGIES and view.old_nodes:
            assert prev is not None
            t0 = perf_counter()
            if strategy == "ltf":
                terms = ablation_terms(cfg.ablation)
                with_sim = (
                    cfg.ablation == "both_plus_ldst" and cfg.beta > 0 and sel_cfg.m_prime > 0
                )
                buffer = select(
                    graph, view, prev, sel_cfg,
                    terms=terms, with_sim=with_sim, squared_kernel=kernel_squared,
                )
                kp = KernelParams(
                    gamma=buffer.meta["gamma"], squared=buffer.meta["squared_kernel"]
                )
            else:
                kind = "random" if strategy == "er" else "herding"
                buffer = baseline_select(kind, graph, view, prev, sel_cfg.m, seed=sel_cfg.seed)
            sel_ms = (perf_counter() - t0) * 1000.0

        result = train_period(model, graph, view, buffer, cfg, kp=kp)
        precisions = [
            precision_per_set(model, graph, view, graph.period(i).classes, TEST)
            for i in range(1, n + 1)
        ]
        outcomes.append(
            PeriodOutcome(
                period=n,
                precisions=precisions,
                ap=ap_metric(precisions),
                epoch_log=result.log,
                selection_ms=sel_ms,
                epochs_ran=result.epochs_ran,
                best_epoch=result.best_epoch,
                buffer=buffer,
                model_snapshot=None,
            )
        )
        prev = snapshot(model)
        if keep_snapshots:
            outcomes[-1].model_snapshot = prev
    return outcomes
