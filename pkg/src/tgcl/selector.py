"""Budgeted replay-subset selection over a period's old-class nodes.

Two subsets are selected greedily from each partition of the old-class
training nodes, scored under the frozen previous-period model:

* the rehearsal subset, minimizing a weighted per-node classification
  loss plus a kernel witness for the marginal squared-MMD effect, and
* the anchor subset, minimizing the witness alone (kernel herding).

Scoring runs in ``witness`` mode (the cheap cached-sum witness) or
``exact-marginal`` mode (the true objective increase, used as the
verification oracle). Random, k-means, and hierarchical partitioners are
provided, along with random and herding baseline selectors and a
brute-force enumerator for tiny instances.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from time import perf_counter
from typing import NamedTuple, Sequence

import json

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import cdist

from .backbone import Model, NodeContext, build_contexts, build_inputs, classify, classify_batch, embed_batch
from .graph import TRAIN, PeriodView, TemporalGraph
from .kernels import KernelParams, kernel_matrix, median_heuristic_gamma, mmd_sq

PARTITIONERS = ("random", "kmeans", "hierarchical")
SCORING_MODES = ("witness", "exact-marginal")
SCORE_TERMS = ("err", "dist")
BASELINE_KINDS = ("random", "herding")

_STREAM_PARTITION = 1
_STREAM_BASELINE = 2


@dataclass(frozen=True)
class SelectionConfig:
    """Budgets and knobs for subset selection.

    ``m`` is the rehearsal budget, ``m_prime`` the anchor budget, ``p``
    the partition size (must exceed ``m``), ``alpha`` the error weight.
    """

    alpha: float = 1.0
    m: int = 50
    m_prime: int = 50
    p: int = 250
    partitioner: str = "random"
    scoring_mode: str = "witness"
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.m_prime < 0:
            raise ValueError("m_prime must be >= 0")
        if self.p <= self.m:
            raise ValueError(f"partition size p={self.p} must exceed budget m={self.m}")
        if self.partitioner not in PARTITIONERS:
            raise ValueError(f"unknown partitioner {self.partitioner!r}")
        if self.scoring_mode not in SCORING_MODES:
            raise ValueError(f"unknown scoring mode {self.scoring_mode!r}")


class SubEntry(NamedTuple):
    node_id: int
    label: int
    j_cls: float


@dataclass
class ReplayBuffer:
    """Selected subsets with frozen selection-time scores and metadata."""

    period_built: int
    sub: list[SubEntry]
    sim: list[int]
    meta: dict = field(default_factory=dict)

    @property
    def sub_ids(self) -> list[int]:
        return [e.node_id for e in self.sub]

    def to_json_dict(self) -> dict:
        return {
            "period": self.period_built,
            "sub": [{"id": e.node_id, "label": e.label, "j_cls": e.j_cls} for e in self.sub],
            "sim": list(self.sim),
            "config": self.meta,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ReplayBuffer":
        return cls(
            period_built=int(d["period"]),
            sub=[SubEntry(int(e["id"]), int(e["label"]), float(e["j_cls"])) for e in d["sub"]],
            sim=[int(v) for v in d["sim"]],
            meta=dict(d.get("config", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Scoring inputs
# ---------------------------------------------------------------------------

def j_cls(prev: Model, ctx: NodeContext) -> float:
    """Cross-entropy of the frozen model's prediction against the true label."""
    probs = classify(prev, ctx)
    idx = prev.class_index(ctx.node.class_id)
    return float(-np.log(np.clip(probs[idx], 1e-300, None)))


@dataclass(frozen=True, eq=False)
class SelectionPool:
    """Candidates with frozen scoring inputs (embeddings and per-node loss)."""

    ids: tuple[int, ...]
    emb: np.ndarray
    jcls: np.ndarray
    kp: KernelParams

    @cached_property
    def _row(self) -> dict[int, int]:
        return {v: i for i, v in enumerate(self.ids)}

    def rows_of(self, node_ids: Sequence[int]) -> list[int]:
        return [self._row[v] for v in node_ids]

    def take(self, node_ids: Sequence[int]) -> "SelectionPool":
        rows = self.rows_of(node_ids)
        return SelectionPool(
            ids=tuple(node_ids), emb=self.emb[rows], jcls=self.jcls[rows], kp=self.kp
        )


def build_pool(
    graph: TemporalGraph,
    view: PeriodView,
    node_ids: Sequence[int],
    prev: Model,
    kp: KernelParams | None = None,
    gamma_seed: int = 0,
    squared_kernel: bool = False,
) -> SelectionPool:
    """Embed the candidates under ``prev`` and freeze their losses.

    When ``kp`` is not given, the kernel bandwidth comes from the median
    heuristic on these embeddings (recomputed per period by the caller);
    ``squared_kernel`` switches to the squared-distance kernel variant.
    """
    if not node_ids:
        raise ValueError("empty candidate set")
    eval_time = graph.period(view.period_index).t_end
    ctxs = build_contexts(graph, node_ids, eval_time)
    z = build_inputs(ctxs)
    emb = embed_batch(prev, z)
    probs = classify_batch(prev, z)
    y = np.array([prev.class_index(graph.nodes[v].class_id) for v in node_ids], dtype=int)
    jc = -np.log(np.clip(probs[np.arange(len(node_ids)), y], 1e-300, None))
    if kp is None:
        if len(node_ids) >= 2:
            kp = median_heuristic_gamma(emb, seed=gamma_seed, squared=squared_kernel)
        else:
            kp = KernelParams(gamma=1.0, squared=squared_kernel)
    return SelectionPool(ids=tuple(node_ids), emb=emb, jcls=jc, kp=kp)


class SubsetObjective(NamedTuple):
    total: float
    err: float
    dist: float


def subset_objective(
    pool: SelectionPool,
    rows: Sequence[int],
    alpha: float,
    terms: Sequence[str] = SCORE_TERMS,
) -> SubsetObjective:
    """Budgeted objective of a subset: weighted mean loss + squared MMD
    between the full pool and the subset. Both terms are 0 for an empty
    subset."""
    rows = list(rows)
    err = float(np.mean(pool.jcls[rows])) if rows else 0.0
    dist = mmd_sq(pool.emb, pool.emb[rows], pool.kp) if rows else 0.0
    total = 0.0
    if "err" in terms:
        total += alpha * err
    if "dist" in terms:
        total += dist
    return SubsetObjective(total=total, err=err, dist=dist)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def _even_sizes(n: int, w: int) -> list[int]:
    base = n // w
    return [base + (1 if i < n % w else 0) for i in range(w)]


def partition(
    old_nodes: Sequence[int],
    cfg: SelectionConfig,
    embeddings: np.ndarray | None = None,
) -> list[list[int]]:
    """Split candidates into ``ceil(n / p)`` parts.

    ``random`` shuffles then chunks evenly (size difference at most 1);
    ``kmeans`` and ``hierarchical`` cluster on the given embeddings, keeping
    natural cluster sizes but spilling members beyond ``p`` to the nearest
    cluster with room. Deterministic given the config seed.
    """
    ids = list(old_nodes)
    if not ids:
        raise ValueError("cannot partition an empty node list")
    n = len(ids)
    w = -(-n // cfg.p)  # ceil
    if w == 1:
        return [sorted(ids)]
    sizes = _even_sizes(n, w)
    rng = np.random.default_rng((cfg.seed, _STREAM_PARTITION))
    if cfg.partitioner == "random":
        perm = rng.permutation(np.array(sorted(ids)))
        parts, pos = [], 0
        for s in sizes:
            parts.append(sorted(int(v) for v in perm[pos : pos + s]))
            pos += s
        return parts

    if embeddings is None:
        raise ValueError(f"{cfg.partitioner} partitioner needs candidate embeddings")
    emb = np.asarray(embeddings, dtype=float)
    if emb.shape[0] != n:
        raise ValueError("embeddings must align with old_nodes")
    order = np.argsort(np.array(ids))
    ids_arr = np.array(ids)[order]
    emb = emb[order]

    if cfg.partitioner == "kmeans":
        labels, centers = _kmeans(emb, w, rng)
    else:
        link = linkage(emb, method="average")
        labels = fcluster(link, t=w, criterion="maxclust") - 1
        centers = np.stack([
            emb[labels == j].mean(axis=0) if np.any(labels == j) else emb.mean(axis=0)
            for j in range(w)
        ])
    return _balance_clusters(ids_arr, emb, labels, centers, cap=cfg.p, w=w)


def _kmeans(emb: np.ndarray, w: int, rng: np.random.Generator, iters: int = 100):
    """Plain seeded Lloyd's iterations; ties break to the lowest cluster."""
    init = rng.choice(emb.shape[0], size=w, replace=False)
    centers = emb[init].copy()
    labels = np.full(emb.shape[0], -1, dtype=int)
    for _ in range(iters):
        new_labels = cdist(emb, centers).argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(w):
            members = emb[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels, centers


def _balance_clusters(ids_arr, emb, labels, centers, cap, w) -> list[list[int]]:
    """Cap clusters at size ``cap``; overflow members spill to the nearest
    cluster with room. Cluster sizes stay natural below the cap, unlike the
    evenly chunked random partitioner."""
    parts: list[list[int]] = [[] for _ in range(w)]
    spill: list[int] = []
    for j in range(w):
        members = np.flatnonzero(labels == j)
        if len(members) == 0:
            continue
        d = np.linalg.norm(emb[members] - centers[j], axis=1)
        order = members[np.lexsort((ids_arr[members], d))]
        parts[j] = [int(ids_arr[r]) for r in order[:cap]]
        spill.extend(int(r) for r in order[cap:])
    spill.sort(key=lambda r: int(ids_arr[r]))
    for r in spill:
        dists = np.linalg.norm(centers - emb[r], axis=1)
        for j in sorted(range(w), key=lambda j: (dists[j], j)):
            if len(parts[j]) < cap:
                parts[j].append(int(ids_arr[r]))
                break
    return [sorted(p) for p in parts]


def _share(total: int, sizes: Sequence[int]) -> list[int]:
    """Even per-part quotas summing to ``total``; earlier parts take the
    remainder, overflow beyond a part's size spills to later parts."""
    w = len(sizes)
    quotas = [total // w] * w
    for i in range(total % w):
        quotas[i] += 1
    overflow = 0
    for i in range(w):
        if quotas[i] > sizes[i]:
            overflow += quotas[i] - sizes[i]
            quotas[i] = sizes[i]
    i = 0
    while overflow > 0 and i < w:
        room = sizes[i] - quotas[i]
        take = min(room, overflow)
        quotas[i] += take
        overflow -= take
        i += 1
    if overflow:
        raise ValueError("budget exceeds the number of available candidates")
    return quotas


# ---------------------------------------------------------------------------
# Greedy selection
# ---------------------------------------------------------------------------

def _check_terms(terms: Sequence[str]) -> tuple[bool, bool]:
    unknown = set(terms) - set(SCORE_TERMS)
    if unknown or not terms:
        raise ValueError(f"terms must be a nonempty subset of {SCORE_TERMS}, got {terms!r}")
    return "err" in terms, "dist" in terms


def _greedy(
    pool: SelectionPool,
    budget: int,
    alpha: float,
    terms: Sequence[str],
    mode: str,
) -> list[int]:
    n = len(pool.ids)
    if budget == 0:
        return []
    if n == 0:
        raise ValueError("empty part")
    if budget > n:
        raise ValueError(f"budget {budget} exceeds part size {n}")
    use_err, use_dist = _check_terms(terms)

    ids = np.array(pool.ids)
    k = kernel_matrix(pool.emb, pool.emb, pool.kp)
    diag = np.diag(k).copy()
    col_mean = k.mean(axis=0)
    err_score = alpha * pool.jcls if use_err else np.zeros(n)

    sub_sum = np.zeros(n)  # sum_{u in selected} k(v, u), per candidate v
    mask = np.zeros(n, dtype=bool)
    selected: list[int] = []
    kaa_mean = float(k.mean())
    s_pair = 0.0  # sum over selected x selected of k (incl. diagonal)
    s_col = 0.0  # sum over selected of their column sums
    s_err = 0.0

    for _ in range(budget):
        s = len(selected)
        if mode == "witness":
            score = err_score.astype(float).copy()
            if use_dist:
                if s:
                    score += 2.0 * sub_sum / s - 2.0 * col_mean
                else:
                    score -= 2.0 * col_mean
        else:  # exact-marginal: objective value of selected + candidate
            score = np.zeros(n)
            if use_err:
                score += alpha * (s_err + pool.jcls) / (s + 1)
            if use_dist:
                pair_new = s_pair + 2.0 * sub_sum + diag
                col_new = s_col + col_mean * n
                score += kaa_mean + pair_new / (s + 1) ** 2 - 2.0 * col_new / (n * (s + 1))
        score[mask] = np.inf
        best = score.min()
        tied = np.flatnonzero(score == best)
        pick = int(tied[np.argmin(ids[tied])])

        s_pair += 2.0 * sub_sum[pick] + diag[pick]
        s_col += col_mean[pick] * n
        s_err += float(pool.jcls[pick])
        sub_sum += k[:, pick]
        mask[pick] = True
        selected.append(pick)
    return [int(ids[i]) for i in selected]


def greedy_select_sub(
    pool: SelectionPool,
    budget_w: int,
    cfg: SelectionConfig,
    terms: Sequence[str] = SCORE_TERMS,
) -> list[int]:
    """Greedy rehearsal picks from one part: argmin of the combined score,
    ties broken by smallest node id, in selection order."""
    return _greedy(pool, budget_w, cfg.alpha, terms, cfg.scoring_mode)


def greedy_select_sim(pool: SelectionPool, budget_w: int, cfg: SelectionConfig) -> list[int]:
    """Greedy anchor picks: distribution term only (kernel herding)."""
    return _greedy(pool, budget_w, 0.0, ("dist",), cfg.scoring_mode)


def select(
    graph: TemporalGraph,
    view: PeriodView,
    prev: Model,
    cfg: SelectionConfig,
    kp: KernelParams | None = None,
    terms: Sequence[str] = SCORE_TERMS,
    with_sim: bool = True,
    squared_kernel: bool = False,
) -> ReplayBuffer:
    """Partition the period's old-class training nodes and select both
    subsets, with per-part quotas summing exactly to the budgets.

    Budgets larger than the candidate count are clamped with a warning.
    Per-part selections are independent; the result is deterministic given
    (graph, snapshot, config).
    """
    old_train = list(view.nodes_of("old", TRAIN))
    if not old_train:
        raise ValueError(f"period {view.period_index} has no old-class training nodes")
    m = cfg.m
    if m > len(old_train):
        warnings.warn(
            f"budget m={m} exceeds {len(old_train)} old-class training nodes; clamping",
            stacklevel=2,
        )
        m = len(old_train)
    m_prime = cfg.m_prime if with_sim else 0
    if m_prime > len(old_train):
        warnings.warn(
            f"budget m_prime={m_prime} exceeds {len(old_train)} candidates; clamping",
            stacklevel=2,
        )
        m_prime = len(old_train)

    pool = build_pool(
        graph, view, old_train, prev, kp=kp, gamma_seed=cfg.seed, squared_kernel=squared_kernel
    )
    parts = partition(old_train, cfg, embeddings=pool.emb)
    sizes = [len(p) for p in parts]
    quotas_sub = _share(m, sizes)
    quotas_sim = _share(m_prime, sizes)

    sub_ids: list[int] = []
    sim_ids: list[int] = []
    part_ms: list[float] = []
    part_objectives: list[dict] = []
    for w, part in enumerate(parts):
        part_pool = pool.take(part)
        t0 = perf_counter()
        chosen = _greedy(part_pool, quotas_sub[w], cfg.alpha, terms, cfg.scoring_mode)
        part_ms.append((perf_counter() - t0) * 1000.0)
        sub_ids.extend(chosen)
        obj = subset_objective(part_pool, part_pool.rows_of(chosen), cfg.alpha, terms)
        part_objectives.append({"err": obj.err, "mmd": obj.dist})
        if quotas_sim[w] > 0:
            sim_ids.extend(_greedy(part_pool, quotas_sim[w], 0.0, ("dist",), cfg.scoring_mode))

    rows = pool.rows_of(sub_ids)
    sub_entries = [
        SubEntry(node_id=v, label=graph.nodes[v].class_id, j_cls=float(pool.jcls[r]))
        for v, r in zip(sub_ids, rows)
    ]
    meta = {
        "gamma": pool.kp.gamma,
        "squared_kernel": pool.kp.squared,
        "alpha": cfg.alpha,
        "m": m,
        "m_prime": m_prime,
        "p": cfg.p,
        "partitioner": cfg.partitioner,
        "scoring_mode": cfg.scoring_mode,
        "terms": list(terms),
        "seed": cfg.seed,
        "part_sizes": sizes,
        "part_ms": part_ms,
        "part_objectives": part_objectives,
    }
    return ReplayBuffer(period_built=view.period_index, sub=sub_entries, sim=sim_ids, meta=meta)


def brute_force_select(
    pool: SelectionPool,
    budget: int,
    cfg: SelectionConfig,
    terms: Sequence[str] = SCORE_TERMS,
) -> tuple[tuple[int, ...], float]:
    """Exhaustive minimizer of the subset objective on tiny instances."""
    n = len(pool.ids)
    if n > 16 or budget > 5:
        raise ValueError(f"instance too large to enumerate (n={n}, budget={budget})")
    if budget > n:
        raise ValueError(f"budget {budget} exceeds candidate count {n}")
    best_ids: tuple[int, ...] | None = None
    best_val = np.inf
    for comb in itertools.combinations(range(n), budget):
        val = subset_objective(pool, comb, cfg.alpha, terms).total
        ids = tuple(sorted(pool.ids[i] for i in comb))
        if val < best_val or (val == best_val and (best_ids is None or ids < best_ids)):
            best_val = val
            best_ids = ids
    assert best_ids is not None
    return best_ids, float(best_val)


# ---------------------------------------------------------------------------
# Baseline selectors
# ---------------------------------------------------------------------------

def baseline_select(
    kind: str,
    graph: TemporalGraph,
    view: PeriodView,
    prev: Model,
    m: int,
    seed: int = 0,
) -> ReplayBuffer:
    """Class-balanced baseline buffers: seeded ``random`` or mean-matching
    ``herding`` (iteratively pick the node keeping the running embedding
    mean closest to the class mean)."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    old_train = list(view.nodes_of("old", TRAIN))
    if not old_train:
        raise ValueError(f"period {view.period_index} has no old-class training nodes")
    m_eff = m
    if m_eff > len(old_train):
        warnings.warn(f"budget m={m} exceeds {len(old_train)} candidates; clamping", stacklevel=2)
        m_eff = len(old_train)

    pool = build_pool(graph, view, old_train, prev)
    by_class: dict[int, list[int]] = {}
    for v in old_train:
        by_class.setdefault(graph.nodes[v].class_id, []).append(v)
    classes = sorted(by_class)
    quotas = _share(m_eff, [len(by_class[c]) for c in classes])

    rng = np.random.default_rng((seed, view.period_index, _STREAM_BASELINE))
    chosen: list[int] = []
    for c, quota in zip(classes, quotas):
        ids = sorted(by_class[c])
        if quota == 0:
            continue
        if kind == "random":
            picks = rng.choice(len(ids), size=quota, replace=False)
            chosen.extend(ids[i] for i in sorted(int(i) for i in picks))
        else:
            chosen.extend(_herd_class(pool, ids, quota))

    rows = pool.rows_of(chosen)
    entries = [
        SubEntry(node_id=v, label=graph.nodes[v].class_id, j_cls=float(pool.jcls[r]))
        for v, r in zip(chosen, rows)
    ]
    meta = {"kind": kind, "m": m_eff, "seed": seed}
    return ReplayBuffer(period_built=view.period_index, sub=entries, sim=[], meta=meta)


def _herd_class(pool: SelectionPool, ids: list[int], quota: int) -> list[int]:
    rows = pool.rows_of(ids)
    emb = pool.emb[rows]
    mu = emb.mean(axis=0)
    ids_arr = np.array(ids)
    picked: list[int] = []
    running = np.zeros_like(mu)
    mask = np.zeros(len(ids), dtype=bool)
    for step in range(quota):
        cand_means = (running + emb) / (step + 1)
        dists = np.linalg.norm(cand_means - mu, axis=1)
        dists[mask] = np.inf
        best = dists.min()
        tied = np.flatnonzero(dists == best)
        pick = int(tied[np.argmin(ids_arr[tied])])
        mask[pick] = True
        running += emb[pick]
        picked.append(int(ids_arr[pick]))
    return picked
