"""Event-based temporal graph data model.

A temporal graph is a set of labeled, feature-carrying nodes connected by
time-stamped interaction events, with the timeline divided into contiguous
periods. Every period introduces a fresh, disjoint set of classes, so at
period ``n`` the active population splits into "old" nodes (classes
introduced before ``n``) and "new" nodes (classes introduced at ``n``).

This module provides the immutable data types, the per-period old/new
split with stratified train/val/test assignment, a synthetic generator
with controllable per-class feature drift, and CSV/JSON persistence.
"""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field, asdict
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TRAIN = "train"
VAL = "val"
TEST = "test"
SPLIT_NAMES = (TRAIN, VAL, TEST)

#: train / val / test fractions used when splitting each period's nodes.
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class GraphFormatError(ValueError):
    """A graph file violates the on-disk format (message carries file:line)."""


@dataclass(frozen=True)
class Event:
    """One interaction between two distinct nodes at time ``t``."""

    src: int
    dst: int
    t: float

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"self-loop event on node {self.src} at t={self.t}")

    def endpoints(self) -> tuple[int, int]:
        return (self.src, self.dst)


@dataclass(frozen=True, eq=False)
class NodeRecord:
    """A node with its class label, class-introduction period, and feature.

    ``birth_period`` is the period whose class set contains ``class_id``;
    a node's actual presence in any period is determined by its events.
    """

    id: int
    class_id: int
    birth_period: int
    feature: np.ndarray

    def __post_init__(self):
        feat = np.asarray(self.feature, dtype=float)
        feat.setflags(write=False)
        object.__setattr__(self, "feature", feat)


@dataclass(frozen=True)
class PeriodSpec:
    """Time span and class set of one period (1-based ``index``)."""

    index: int
    t_start: float
    t_end: float
    classes: tuple[int, ...]

    def contains(self, t: float, last: bool = False) -> bool:
        if last:
            return self.t_start <= t <= self.t_end
        return self.t_start <= t < self.t_end


@dataclass(frozen=True, eq=False)
class TemporalGraph:
    """Immutable temporal graph: nodes, time-sorted events, period specs."""

    nodes: Mapping[int, NodeRecord]
    events: tuple[Event, ...]
    periods: tuple[PeriodSpec, ...]

    def __post_init__(self):
        _validate_graph(self)

    @classmethod
    def from_parts(
        cls,
        nodes: Iterable[NodeRecord],
        events: Iterable[Event],
        periods: Iterable[PeriodSpec],
    ) -> "TemporalGraph":
        """Build a graph from loose parts; events are sorted by time."""
        node_map: dict[int, NodeRecord] = {}
        for rec in nodes:
            if rec.id in node_map:
                raise ValueError(f"duplicate node id {rec.id}")
            node_map[rec.id] = rec
        evs = tuple(sorted(events, key=lambda e: e.t))
        return cls(nodes=node_map, events=evs, periods=tuple(periods))

    # -- period helpers ----------------------------------------------------

    @property
    def num_periods(self) -> int:
        return len(self.periods)

    def period(self, n: int) -> PeriodSpec:
        if not 1 <= n <= len(self.periods):
            raise ValueError(f"unknown period index {n} (have 1..{len(self.periods)})")
        return self.periods[n - 1]

    def period_of(self, t: float) -> int:
        """Index of the unique period containing timestamp ``t``."""
        starts = [p.t_start for p in self.periods]
        i = bisect_right(starts, t) - 1
        if i >= 0 and self.periods[i].contains(t, last=(i == len(self.periods) - 1)):
            return self.periods[i].index
        raise ValueError(f"timestamp {t} lies outside all periods")

    def classes_before(self, n: int) -> frozenset[int]:
        """Union of class sets introduced strictly before period ``n``."""
        out: set[int] = set()
        for p in self.periods[: n - 1]:
            out.update(p.classes)
        return frozenset(out)

    def events_in_period(self, n: int) -> tuple[Event, ...]:
        spec = self.period(n)
        ts = self._event_times
        lo = bisect_left(ts, spec.t_start)
        hi = bisect_right(ts, spec.t_end)
        out = [
            e
            for e in self.events[lo:hi]
            if spec.contains(e.t, last=(n == len(self.periods)))
        ]
        return tuple(out)

    # -- cached structure --------------------------------------------------

    @cached_property
    def _event_times(self) -> list[float]:
        return [e.t for e in self.events]

    @cached_property
    def adjacency(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Per-node ``(times, neighbor_ids)`` arrays sorted by event time.

        Ties in time keep event order, so "most recent" is well defined.
        """
        lists: dict[int, list[tuple[float, int]]] = {v: [] for v in self.nodes}
        for e in self.events:
            lists[e.src].append((e.t, e.dst))
            lists[e.dst].append((e.t, e.src))
        out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for v, pairs in lists.items():
            ts = np.array([p[0] for p in pairs], dtype=float)
            nb = np.array([p[1] for p in pairs], dtype=int)
            out[v] = (ts, nb)
        return out

    @cached_property
    def debut_period(self) -> dict[int, int]:
        """First period each node is active in (has an event); nodes with no
        events are absent."""
        out: dict[int, int] = {}
        for e in self.events:  # events are time-sorted, first hit wins
            for v in (e.src, e.dst):
                if v not in out:
                    out[v] = self.period_of(e.t)
        return out


def _validate_graph(g: TemporalGraph) -> None:
    if not g.periods:
        raise ValueError("graph has no periods")
    seen_classes: set[int] = set()
    for i, p in enumerate(g.periods):
        if p.index != i + 1:
            raise ValueError(f"period indices must be 1..P in order, got {p.index} at position {i}")
        if not p.t_start < p.t_end:
            raise ValueError(f"period {p.index} has empty time span")
        if i > 0 and p.t_start != g.periods[i - 1].t_end:
            raise ValueError(f"period {p.index} is not contiguous with period {p.index - 1}")
        if not p.classes:
            raise ValueError(f"period {p.index} has an empty class set")
        overlap = seen_classes.intersection(p.classes)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} appear in more than one period")
        seen_classes.update(p.classes)

    dim = None
    for v, rec in g.nodes.items():
        if rec.id != v:
            raise ValueError(f"node map key {v} does not match record id {rec.id}")
        if rec.feature.ndim != 1:
            raise ValueError(f"node {v}: feature must be a flat vector")
        if dim is None:
            dim = rec.feature.shape[0]
        elif rec.feature.shape[0] != dim:
            raise ValueError(
                f"node {v}: feature dimension {rec.feature.shape[0]} != {dim}"
            )
        spec = g.period(rec.birth_period)
        if rec.class_id not in spec.classes:
            raise ValueError(
                f"node {v}: class {rec.class_id} not in period {rec.birth_period} classes"
            )

    prev_t = -math.inf
    for e in g.events:
        if e.src not in g.nodes or e.dst not in g.nodes:
            raise ValueError(f"event ({e.src},{e.dst},{e.t}) references an unknown node")
        if e.t < prev_t:
            raise ValueError("events are not sorted by time")
        prev_t = e.t
        g.period_of(e.t)  # raises if outside all periods


@dataclass(frozen=True)
class PeriodView:
    """Old/new decomposition of one period, with per-node split assignment.

    ``old_nodes`` and ``new_nodes`` are the nodes of previously-introduced
    and newly-introduced classes that are active (incident to at least one
    event) in the period. The two event sets overlap exactly at events
    joining an old node to a new node.
    """

    period_index: int
    old_nodes: tuple[int, ...]
    new_nodes: tuple[int, ...]
    events_old: tuple[Event, ...]
    events_new: tuple[Event, ...]
    splits: Mapping[int, str]

    def nodes_of(self, group: str = "all", split: str | None = None) -> tuple[int, ...]:
        """Node ids in ``group`` ('old'|'new'|'all'), optionally one split."""
        if group == "old":
            ids: Sequence[int] = self.old_nodes
        elif group == "new":
            ids = self.new_nodes
        elif group == "all":
            ids = tuple(sorted(self.old_nodes + self.new_nodes))
        else:
            raise ValueError(f"unknown node group {group!r}")
        if split is None:
            return tuple(ids)
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return tuple(v for v in ids if self.splits[v] == split)


def split_period(graph: TemporalGraph, n: int, split_seed: int = 0) -> PeriodView:
    """Decompose period ``n`` into its old-class and new-class parts.

    Membership is decided by class set; only nodes incident to at least one
    event inside the period's time span are considered active. Node splits
    are stratified by class at 80/10/10 and deterministic given
    ``(graph, n, split_seed)``.
    """
    spec = graph.period(n)
    events = graph.events_in_period(n)
    if not events:
        raise ValueError(f"period {n} has no events")
    old_classes = graph.classes_before(n)
    new_classes = frozenset(spec.classes)

    active: set[int] = set()
    for e in events:
        active.add(e.src)
        active.add(e.dst)
    old_nodes = tuple(sorted(v for v in active if graph.nodes[v].class_id in old_classes))
    new_nodes = tuple(sorted(v for v in active if graph.nodes[v].class_id in new_classes))

    old_set = frozenset(old_nodes)
    new_set = frozenset(new_nodes)
    events_old = tuple(e for e in events if e.src in old_set or e.dst in old_set)
    events_new = tuple(e for e in events if e.src in new_set or e.dst in new_set)

    assignment = node_splits(graph, split_seed)
    splits = {v: assignment[v] for v in old_nodes + new_nodes}
    return PeriodView(
        period_index=n,
        old_nodes=old_nodes,
        new_nodes=new_nodes,
        events_old=events_old,
        events_new=events_new,
        splits=splits,
    )


def node_splits(graph: TemporalGraph, split_seed: int = 0) -> dict[int, str]:
    """Stable per-node train/val/test assignment, stratified by class.

    A node is assigned once, within the cohort of nodes that debut in the
    same period, and keeps that assignment in every later period it stays
    active in. This rules out a node being trained on in one period and
    tested in a later one.
    """
    cache: dict[int, dict[int, str]] = graph.__dict__.setdefault("_split_cache", {})
    if split_seed in cache:
        return cache[split_seed]
    cohorts: dict[int, dict[int, list[int]]] = {}
    for v, debut in graph.debut_period.items():
        cohorts.setdefault(debut, {}).setdefault(graph.nodes[v].class_id, []).append(v)
    out: dict[int, str] = {}
    for debut in sorted(cohorts):
        rng = np.random.default_rng((split_seed, debut))
        for c in sorted(cohorts[debut]):
            ids = sorted(cohorts[debut][c])
            perm = rng.permutation(len(ids))
            n_val = int(len(ids) * SPLIT_FRACTIONS[1])
            n_test = int(len(ids) * SPLIT_FRACTIONS[2])
            for j, k in enumerate(perm):
                if j < n_val:
                    out[ids[k]] = VAL
                elif j < n_val + n_test:
                    out[ids[k]] = TEST
                else:
                    out[ids[k]] = TRAIN
    cache[split_seed] = out
    return out


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the drifting-cluster synthetic generator.

    Every period introduces ``classes_per_period`` classes with fresh
    Gaussian feature centers, and every class alive at a period (old or
    new) receives ``nodes_per_class_per_period`` fresh nodes. Old-class
    centers move by ``drift_step`` along a fixed per-class random direction
    at each new period, so old-class data keeps evolving.
    """

    num_periods: int = 3
    classes_per_period: int = 3
    nodes_per_class_per_period: int = 200
    feature_dim: int = 8
    class_center_scale: float = 1.5
    drift_step: float = 0.8
    noise_sigma: float = 1.0
    intra_class_edge_prob: float = 0.9
    inter_class_edge_prob: float = 0.1
    events_per_node: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.num_periods < 1:
            raise ValueError("num_periods must be >= 1")
        if self.classes_per_period < 1 or self.nodes_per_class_per_period < 1:
            raise ValueError("need at least one class and one node per class per period")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.drift_step < 0:
            raise ValueError("drift_step must be >= 0")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        for name in ("intra_class_edge_prob", "inter_class_edge_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.events_per_node < 0:
            raise ValueError("events_per_node must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        return cls(**dict(d))


def generate_synthetic(cfg: SynthConfig) -> TemporalGraph:
    """Generate a drifting-cluster temporal graph, deterministic per seed.

    At period ``p`` each alive class receives a fresh cohort of nodes whose
    features are sampled around the class's (possibly drifted) center.
    Nodes persist: every node created so far draws ``events_per_node``
    events per period against intra/inter-class mixture weights, so a
    class's active population at a later period is a mixture of cohorts
    along its drift trail.
    """
    rng = np.random.default_rng(cfg.seed)
    n_per = cfg.nodes_per_class_per_period
    dim = cfg.feature_dim
    periods = tuple(
        PeriodSpec(
            index=p,
            t_start=float(p - 1),
            t_end=float(p),
            classes=tuple(range((p - 1) * cfg.classes_per_period, p * cfg.classes_per_period)),
        )
        for p in range(1, cfg.num_periods + 1)
    )

    centers: dict[int, np.ndarray] = {}
    drift_dir: dict[int, np.ndarray] = {}
    class_period: dict[int, int] = {}
    records: list[NodeRecord] = []
    events: list[Event] = []
    next_id = 0

    w_intra = cfg.intra_class_edge_prob
    w_inter = cfg.inter_class_edge_prob
    if cfg.events_per_node > 0 and w_intra + w_inter == 0.0:
        raise ValueError("intra and inter edge probabilities cannot both be zero")
    q_intra = w_intra / (w_intra + w_inter) if (w_intra + w_inter) > 0 else 0.0

    alive: list[tuple[int, int]] = []  # (node id, class id), persists across periods
    for spec in periods:
        p = spec.index
        for c in spec.classes:
            centers[c] = rng.normal(0.0, cfg.class_center_scale, size=dim)
            v = rng.normal(0.0, 1.0, size=dim)
            drift_dir[c] = v / max(float(np.linalg.norm(v)), 1e-12)
            class_period[c] = p

        for c in sorted(class_period):
            mean = centers[c] + (p - class_period[c]) * cfg.drift_step * drift_dir[c]
            feats = mean + rng.normal(0.0, cfg.noise_sigma, size=(n_per, dim))
            for i in range(n_per):
                records.append(
                    NodeRecord(id=next_id, class_id=c, birth_period=class_period[c], feature=feats[i])
                )
                alive.append((next_id, c))
                next_id += 1

        # every node created so far stays active: old-class data at a later
        # period mixes fresh drifted cohorts with earlier ones
        by_class: dict[int, list[int]] = {}
        for v, c in alive:
            by_class.setdefault(c, []).append(v)
        others = {c: [v for v, cc in alive if cc != c] for c in by_class}
        t_hi = np.nextafter(spec.t_end, spec.t_start)  # keep events inside the period
        for u, c in alive:
            same = by_class[c]
            for _ in range(cfg.events_per_node):
                want_intra = rng.random() < q_intra
                pool = same if want_intra else others[c]
                if want_intra and len(same) <= 1:
                    pool = others[c]
                elif not want_intra and not others[c]:
                    pool = same
                if not pool or (pool is same and len(same) <= 1):
                    continue
                idx = int(rng.integers(0, len(pool)))
                partner = pool[idx]
                if partner == u:  # same-class pool contains u; deterministic re-pick
                    partner = pool[(idx + 1) % len(pool)]
                t = min(float(rng.uniform(spec.t_start, spec.t_end)), t_hi)
                events.append(Event(src=u, dst=partner, t=t))

    return TemporalGraph.from_parts(records, events, periods)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

NODE_BASENAME = "nodes.csv"
EVENT_BASENAME = "events.csv"
PERIOD_BASENAME = "periods.json"


def save_graph(graph: TemporalGraph, out_dir: str | Path) -> dict[str, Path]:
    """Write ``nodes.csv``, ``events.csv``, ``periods.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    node_path = out / NODE_BASENAME
    event_path = out / EVENT_BASENAME
    period_path = out / PERIOD_BASENAME

    dim = _feature_dim(graph)
    with node_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "class", "period"] + [f"f{i}" for i in range(dim)])
        for v in sorted(graph.nodes):
            rec = graph.nodes[v]
            w.writerow(
                [rec.id, rec.class_id, rec.birth_period] + [repr(float(x)) for x in rec.feature]
            )

    with event_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "t"])
        for e in graph.events:
            w.writerow([e.src, e.dst, repr(e.t)])

    with period_path.open("w") as fh:
        json.dump(
            [
                {"index": p.index, "t_start": p.t_start, "t_end": p.t_end, "classes": list(p.classes)}
                for p in graph.periods
            ],
            fh,
            indent=2,
        )
        fh.write("\n")
    return {"nodes": node_path, "events": event_path, "periods": period_path}


def load_graph(
    node_file: str | Path,
    event_file: str | Path,
    period_file: str | Path | None = None,
) -> TemporalGraph:
    """Load and validate a graph; errors name the offending file and line."""
    node_path = Path(node_file)
    event_path = Path(event_file)
    period_path = Path(period_file) if period_file else node_path.parent / PERIOD_BASENAME

    periods = _load_periods(period_path)
    nodes = _load_nodes(node_path)
    events = _load_events(event_path, nodes, periods)
    return TemporalGraph.from_parts(nodes.values(), events, periods)


def _feature_dim(graph: TemporalGraph) -> int:
    for rec in graph.nodes.values():
        return int(rec.feature.shape[0])
    return 0


def _load_periods(path: Path) -> tuple[PeriodSpec, ...]:
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphFormatError(f"{path}: cannot parse period sidecar: {exc}") from exc
    if not isinstance(raw, list):
        raise GraphFormatError(f"{path}: period sidecar must be a list")
    specs = []
    for i, d in enumerate(raw):
        try:
            specs.append(
                PeriodSpec(
                    index=int(d["index"]),
                    t_start=float(d["t_start"]),
                    t_end=float(d["t_end"]),
                    classes=tuple(int(c) for c in d["classes"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"{path}: period entry {i} is malformed: {exc}") from exc
    return tuple(specs)


def _load_nodes(path: Path) -> dict[int, NodeRecord]:
    nodes: dict[int, NodeRecord] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise GraphFormatError(f"{path}:1: empty node file") from None
        if header[:3] != ["id", "class", "period"]:
            raise GraphFormatError(f"{path}:1: node header must start with id,class,period")
        dim = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + dim:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected {3 + dim} columns, got {len(row)}"
                    " (feature dimension mismatch)"
                )
            try:
                vid = int(row[0])
                cls = int(row[1])
                birth = int(row[2])
                feat = np.array([float(x) for x in row[3:]], dtype=float)
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: malformed node row: {exc}") from exc
            if vid in nodes:
                raise GraphFormatError(f"{path}:{lineno}: duplicate node id {vid}")
            nodes[vid] = NodeRecord(id=vid, class_id=cls, birth_period=birth, feature=feat)
    return nodes


def _load_events(
    path: Path, nodes: Mapping[int, NodeRecord], periods: tuple[PeriodSpec, ...]
) -> list[Event]:
    t_lo = periods[0].t_start if periods else 0.0
    t_hi = periods[-1].t_end if periods else 0.0
    events: list[Event] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise GraphFormatError(f"{path}:1: empty event file (need a src,dst,t header)") from None
        if header != ["src", "dst", "t"]:
            raise GraphFormatError(f"{path}:1: event header must be src,dst,t")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise GraphFormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                src, dst, t = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: malformed event row: {exc}") from exc
            if src not in nodes or dst not in nodes:
                raise GraphFormatError(f"{path}:{lineno}: event references unknown node")
            if not t_lo <= t <= t_hi:
                raise GraphFormatError(
                    f"{path}:{lineno}: timestamp {t} outside all periods [{t_lo}, {t_hi}]"
                )
            try:
                events.append(Event(src=src, dst=dst, t=t))
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: {exc}") from exc
    return events


def graphs_equal(a: TemporalGraph, b: TemporalGraph) -> bool:
    """Exact equality of all records, events, and period specs."""
    if a.periods != b.periods or set(a.nodes) != set(b.nodes):
        return False
    for v, ra in a.nodes.items():
        rb = b.nodes[v]
        if (ra.class_id, ra.birth_period) != (rb.class_id, rb.birth_period):
            return False
        if ra.feature.shape != rb.feature.shape or not np.array_equal(ra.feature, rb.feature):
            return False
    return a.events == b.events
