import itertools
import math

import numpy as np
import pytest

from tgcl.backbone import Backbone, NodeContext, snapshot
from tgcl.graph import NodeRecord, SynthConfig, generate_synthetic, split_period
from tgcl.kernels import KernelParams, kernel_bound_check, mmd_sq
from tgcl.selector import (
    ReplayBuffer,
    SelectionConfig,
    SelectionPool,
    _share,
    baseline_select,
    brute_force_select,
    build_pool,
    greedy_select_sim,
    greedy_select_sub,
    j_cls,
    partition,
    select,
    subset_objective,
)

from conftest import trained_toy_snapshot


def make_pool(rng, n, dim=2, gamma=1.0, jcls=None, ids=None):
    emb = rng.normal(size=(n, dim))
    jc = np.abs(rng.normal(size=n)) + 0.01 if jcls is None else np.asarray(jcls, float)
    ids = tuple(range(n)) if ids is None else tuple(ids)
    return SelectionPool(ids=ids, emb=emb, jcls=jc, kp=KernelParams(gamma))


def flat_model(feature_dim=2, hidden_dim=4, classes=(0, 1, 2)):
    """Model whose embedding is all-ones regardless of input."""
    model = Backbone(feature_dim, hidden_dim=hidden_dim, seed=0)
    model.w_agg[:] = 0.0
    model.w_hid[:] = 0.0
    model.b_hid[:] = 1.0
    model.grow_head(list(classes))
    model.w_head[:] = 0.0
    return model


def ctx_for_class(c, feature_dim=2):
    rec = NodeRecord(id=0, class_id=c, birth_period=1, feature=np.zeros(feature_dim))
    return NodeContext(node=rec, neighbors=())


class TestJCls:
    def test_perfect_prediction_zero_loss(self):
        model = flat_model()
        model.w_head[0, :] = 25.0  # logit 100 for class 0, 0 elsewhere
        assert j_cls(snapshot(model), ctx_for_class(0)) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_prediction_log_c(self):
        model = flat_model(classes=(0, 1, 2))
        assert j_cls(snapshot(model), ctx_for_class(1)) == pytest.approx(math.log(3), abs=1e-12)

    def test_matches_hand_log_loss(self):
        model = flat_model(classes=(0, 1, 2))
        rng = np.random.default_rng(0)
        model.w_head = rng.normal(size=model.w_head.shape)
        logits = model.w_head.sum(axis=1)  # embedding is all ones
        exps = [math.exp(l - max(logits)) for l in logits]
        expected = -math.log(exps[2] / sum(exps))
        assert j_cls(snapshot(model), ctx_for_class(2)) == pytest.approx(expected, abs=1e-12)

    def test_unknown_label_rejected(self):
        model = flat_model(classes=(0, 1))
        with pytest.raises(ValueError, match="unknown"):
            j_cls(snapshot(model), ctx_for_class(9))


class TestPartition:
    def cfg(self, p, partitioner="random", seed=0, m=1):
        return SelectionConfig(m=m, m_prime=0, p=p, partitioner=partitioner, seed=seed)

    def test_single_part_when_small(self):
        parts = partition(list(range(8)), self.cfg(p=10))
        assert parts == [list(range(8))]

    def test_even_chunking_25_by_10(self):
        parts = partition(list(range(25)), self.cfg(p=10))
        assert sorted(len(p) for p in parts) == [8, 8, 9]
        assert sorted(v for part in parts for v in part) == list(range(25))

    def test_random_preserves_class_proportions_at_scale(self):
        # parts of >= 1152 samples keep per-class proportions within 10%
        graph = generate_synthetic(
            SynthConfig(
                num_periods=2,
                classes_per_period=3,
                nodes_per_class_per_period=1000,
                events_per_node=2,
                seed=4,
            )
        )
        view = split_period(graph, 2)
        old_train = list(view.nodes_of("old", "train"))
        assert len(old_train) >= 2304
        cfg = self.cfg(p=(len(old_train) + 1) // 2, seed=4)
        parts = partition(old_train, cfg)
        assert all(len(p) >= 1152 for p in parts)
        classes = sorted({graph.nodes[v].class_id for v in old_train})
        overall = {
            c: sum(graph.nodes[v].class_id == c for v in old_train) / len(old_train)
            for c in classes
        }
        for part in parts:
            for c in classes:
                frac = sum(graph.nodes[v].class_id == c for v in part) / len(part)
                assert abs(frac - overall[c]) <= 0.10

    @pytest.mark.parametrize("method", ["kmeans", "hierarchical"])
    def test_clustering_partitioners_cap_sizes(self, method):
        rng = np.random.default_rng(5)
        ids = list(range(40))
        emb = rng.normal(size=(40, 3))
        cfg = self.cfg(p=12, partitioner=method, seed=5)
        parts = partition(ids, cfg, embeddings=emb)
        sizes = [len(p) for p in parts]
        assert sum(sizes) == 40
        assert max(sizes) <= 12  # capped at p, natural sizes below the cap
        assert sorted(v for part in parts for v in part) == ids
        again = partition(ids, cfg, embeddings=emb)
        assert parts == again

    def test_clustering_requires_embeddings(self):
        with pytest.raises(ValueError, match="embeddings"):
            partition(list(range(30)), self.cfg(p=10, partitioner="kmeans"))

    def test_deterministic_given_seed(self):
        ids = list(range(30))
        a = partition(ids, self.cfg(p=7, seed=9))
        b = partition(ids, self.cfg(p=7, seed=9))
        c = partition(ids, self.cfg(p=7, seed=10))
        assert a == b
        assert a != c


class TestShare:
    def test_remainder_to_first_parts(self):
        assert _share(10, [9, 8, 8]) == [4, 3, 3]

    def test_exact_total(self):
        for total in range(0, 20):
            quotas = _share(total, [7, 7, 6])
            assert sum(quotas) == total

    def test_overflow_spills_to_later_parts(self):
        assert _share(10, [2, 8, 8]) == [2, 5, 3]

    def test_too_large_budget_raises(self):
        with pytest.raises(ValueError):
            _share(30, [9, 8, 8])


class TestGreedy:
    def cfg(self, **kw):
        base = dict(alpha=1.0, m=3, m_prime=3, p=100, seed=0)
        base.update(kw)
        return SelectionConfig(**base)

    def test_budget_equals_part_returns_everything(self):
        pool = make_pool(np.random.default_rng(0), 6)
        chosen = greedy_select_sub(pool, 6, self.cfg())
        assert sorted(chosen) == list(pool.ids)

    def test_first_pick_is_herding_centroid(self):
        rng = np.random.default_rng(1)
        pool = make_pool(rng, 10)
        chosen = greedy_select_sub(pool, 1, self.cfg(alpha=0.0))
        # exhaustive scoring of the empty-subset witness
        from tgcl.kernels import kernel_matrix

        k = kernel_matrix(pool.emb, pool.emb, pool.kp)
        scores = -2.0 * k.mean(axis=0)
        assert chosen == [pool.ids[int(scores.argmin())]]

    def test_greedy_beats_most_subsets(self):
        cfg = self.cfg(alpha=1.0)
        for seed in range(50):
            rng = np.random.default_rng(seed)
            pool = make_pool(rng, 10)
            chosen = greedy_select_sub(pool, 3, cfg)
            greedy_obj = subset_objective(pool, pool.rows_of(chosen), 1.0).total
            all_objs = [
                subset_objective(pool, comb, 1.0).total
                for comb in itertools.combinations(range(10), 3)
            ]
            beaten = sum(1 for o in all_objs if greedy_obj <= o + 1e-12)
            assert beaten >= 0.9 * len(all_objs), f"seed {seed}: {beaten}/120"

    def test_exact_marginal_mode_minimizes_each_step(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            pool = make_pool(rng, 10)
            cfg = self.cfg(scoring_mode="exact-marginal")
            chosen = greedy_select_sub(pool, 4, cfg)
            picked_rows = []
            remaining = set(range(10))
            for v in chosen:
                row = pool.rows_of([v])[0]
                best = min(
                    subset_objective(pool, picked_rows + [r], 1.0).total for r in remaining
                )
                mine = subset_objective(pool, picked_rows + [row], 1.0).total
                assert mine <= best + 1e-9
                picked_rows.append(row)
                remaining.discard(row)

    def test_tie_break_smallest_id(self):
        # identical embeddings and losses: every score ties, ids decide
        emb = np.ones((5, 2))
        pool = SelectionPool(
            ids=(50, 10, 40, 20, 30), emb=emb, jcls=np.ones(5), kp=KernelParams(1.0)
        )
        chosen = greedy_select_sub(pool, 3, self.cfg())
        assert chosen == [10, 20, 30]

    def test_diminishing_returns_when_bound_holds(self):
        # 5 far-apart points with a kernel satisfying the sufficient
        # condition, equal per-node losses: objective gains shrink
        emb = np.array([[0.0], [5.0], [10.0], [15.0], [20.0]])
        kp = KernelParams(1.0)
        assert kernel_bound_check(emb, kp, 5).satisfied
        pool = SelectionPool(ids=tuple(range(5)), emb=emb, jcls=np.ones(5), kp=kp)
        chosen = greedy_select_sub(pool, 5, self.cfg(m=4, p=100))
        objs = [
            subset_objective(pool, pool.rows_of(chosen[: t + 1]), 1.0).total
            for t in range(5)
        ]
        gains = [objs[t] - objs[t + 1] for t in range(4)]
        assert all(g >= -1e-12 for g in gains)
        assert all(gains[t + 1] <= gains[t] + 1e-12 for t in range(3))

    def test_sim_budget_zero(self):
        pool = make_pool(np.random.default_rng(2), 5)
        assert greedy_select_sim(pool, 0, self.cfg()) == []

    def test_sim_identical_pair(self):
        emb = np.array([[1.0, 2.0], [1.0, 2.0]])
        pool = SelectionPool(ids=(0, 1), emb=emb, jcls=np.zeros(2), kp=KernelParams(1.0))
        chosen = greedy_select_sim(pool, 1, self.cfg())
        assert len(chosen) == 1
        assert mmd_sq(emb, emb[pool.rows_of(chosen)], pool.kp) == pytest.approx(0.0, abs=1e-12)

    def test_sim_beats_random_subsets(self):
        rng = np.random.default_rng(3)
        pool = make_pool(rng, 12)
        chosen = greedy_select_sim(pool, 4, self.cfg())
        ours = mmd_sq(pool.emb, pool.emb[pool.rows_of(chosen)], pool.kp)
        wins = 0
        for _ in range(1000):
            rows = rng.choice(12, size=4, replace=False)
            if ours <= mmd_sq(pool.emb, pool.emb[rows], pool.kp) + 1e-12:
                wins += 1
        assert wins >= 950

    def test_empty_part_rejected(self):
        pool = SelectionPool(ids=(), emb=np.zeros((0, 2)), jcls=np.zeros(0), kp=KernelParams(1.0))
        with pytest.raises(ValueError):
            greedy_select_sub(pool, 1, self.cfg())


class TestBruteForce:
    def test_full_budget_returns_all(self):
        rng = np.random.default_rng(4)
        pool = make_pool(rng, 5)
        ids, obj = brute_force_select(pool, 5, SelectionConfig(m=4, p=100))
        assert ids == tuple(pool.ids)
        assert obj == pytest.approx(1.0 * float(pool.jcls.mean()), abs=1e-12)

    def test_optimum_bounds_greedy(self):
        cfg = SelectionConfig(alpha=1.0, m=2, p=100, seed=0)
        for seed in range(20):
            pool = make_pool(np.random.default_rng(seed), 6)
            _, best = brute_force_select(pool, 2, cfg)
            greedy = greedy_select_sub(pool, 2, cfg)
            greedy_obj = subset_objective(pool, pool.rows_of(greedy), cfg.alpha).total
            assert best <= greedy_obj + 1e-12

    def test_instance_too_large(self):
        pool = make_pool(np.random.default_rng(5), 17)
        with pytest.raises(ValueError, match="too large"):
            brute_force_select(pool, 2, SelectionConfig(m=2, p=100))


@pytest.fixture(scope="module")
def sel_setting():
    graph = generate_synthetic(
        SynthConfig(
            num_periods=2,
            classes_per_period=3,
            nodes_per_class_per_period=30,
            feature_dim=4,
            seed=8,
        )
    )
    view = split_period(graph, 2)
    prev = trained_toy_snapshot(graph, split_period(graph, 1), seed=8)
    return graph, view, prev


class TestSelect:
    def test_single_partition_matches_direct_greedy(self, sel_setting):
        graph, view, prev = sel_setting
        old_train = list(view.nodes_of("old", "train"))
        cfg = SelectionConfig(m=6, m_prime=4, p=len(old_train) + 1, seed=1)
        buffer = select(graph, view, prev, cfg)
        pool = build_pool(graph, view, old_train, prev, gamma_seed=cfg.seed)
        direct = greedy_select_sub(pool, 6, cfg)
        assert buffer.sub_ids == direct
        assert buffer.sim == greedy_select_sim(pool, 4, cfg)

    def test_budget_exactness_and_quota_split(self, sel_setting):
        graph, view, prev = sel_setting
        n_old = len(view.nodes_of("old", "train"))
        cfg = SelectionConfig(m=10, m_prime=7, p=(n_old + 2) // 3, seed=2)
        buffer = select(graph, view, prev, cfg)
        assert len(buffer.sub) == 10
        assert len(buffer.sim) == 7
        assert len(buffer.meta["part_sizes"]) == 3
        assert set(buffer.sub_ids) <= set(view.nodes_of("old", "train"))
        assert set(buffer.sim) <= set(view.nodes_of("old", "train"))

    def test_clamped_with_warning(self, sel_setting):
        graph, view, prev = sel_setting
        n_old = len(view.nodes_of("old", "train"))
        cfg = SelectionConfig(m=n_old + 50, m_prime=0, p=n_old + 100, seed=3)
        with pytest.warns(UserWarning, match="clamping"):
            buffer = select(graph, view, prev, cfg, with_sim=False)
        assert len(buffer.sub) == n_old

    def test_deterministic(self, sel_setting):
        graph, view, prev = sel_setting
        cfg = SelectionConfig(m=8, m_prime=5, p=30, seed=4)
        a = select(graph, view, prev, cfg)
        b = select(graph, view, prev, cfg)
        da, db = a.to_json_dict(), b.to_json_dict()
        da["config"].pop("part_ms"), db["config"].pop("part_ms")
        assert da == db

    def test_frozen_jcls_scores_valid(self, sel_setting):
        graph, view, prev = sel_setting
        cfg = SelectionConfig(m=8, m_prime=0, p=30, seed=5)
        buffer = select(graph, view, prev, cfg, with_sim=False)
        for entry in buffer.sub:
            assert entry.j_cls >= 0.0
            assert graph.nodes[entry.node_id].class_id == entry.label

    def test_json_round_trip(self, sel_setting, tmp_path):
        graph, view, prev = sel_setting
        cfg = SelectionConfig(m=5, m_prime=3, p=30, seed=6)
        buffer = select(graph, view, prev, cfg)
        path = tmp_path / "buffer.json"
        buffer.save(path)
        loaded = ReplayBuffer.load(path)
        assert loaded.period_built == buffer.period_built
        assert loaded.sub == buffer.sub
        assert loaded.sim == buffer.sim

    def test_no_old_nodes_rejected(self, sel_setting):
        graph, _, prev = sel_setting
        view1 = split_period(graph, 1)
        with pytest.raises(ValueError, match="no old-class"):
            select(graph, view1, prev, SelectionConfig(m=2, p=10))


class TestBaselines:
    def test_everything_selected_when_budget_large(self, sel_setting):
        graph, view, prev = sel_setting
        n_old = len(view.nodes_of("old", "train"))
        with pytest.warns(UserWarning, match="clamping"):
            buffer = baseline_select("random", graph, view, prev, n_old + 10, seed=0)
        assert sorted(buffer.sub_ids) == list(view.nodes_of("old", "train"))

    def test_random_is_class_balanced(self, sel_setting):
        graph, view, prev = sel_setting
        buffer = baseline_select("random", graph, view, prev, 12, seed=1)
        counts: dict[int, int] = {}
        for entry in buffer.sub:
            counts[entry.label] = counts.get(entry.label, 0) + 1
        assert sum(counts.values()) == 12
        assert max(counts.values()) - min(counts.values()) <= 1

    def test_herding_first_pick_is_class_mean_argmin(self, sel_setting):
        graph, view, prev = sel_setting
        buffer = baseline_select("herding", graph, view, prev, 3, seed=2)
        old_train = list(view.nodes_of("old", "train"))
        pool = build_pool(graph, view, old_train, prev)
        by_class: dict[int, list[int]] = {}
        for v in old_train:
            by_class.setdefault(graph.nodes[v].class_id, []).append(v)
        first_of_class: dict[int, int] = {}
        for entry in buffer.sub:
            first_of_class.setdefault(entry.label, entry.node_id)
        for c, ids in sorted(by_class.items()):
            rows = pool.rows_of(sorted(ids))
            emb = pool.emb[rows]
            mu = emb.mean(axis=0)
            dists = np.linalg.norm(emb - mu, axis=1)
            expected = sorted(ids)[int(dists.argmin())]
            assert first_of_class[c] == expected

    def test_herding_identical_embeddings(self, sel_setting):
        graph, view, _ = sel_setting
        model = flat_model(feature_dim=4, classes=sorted(
            {graph.nodes[v].class_id for v in graph.nodes}
        ))
        buffer = baseline_select("herding", graph, view, snapshot(model), 4, seed=3)
        assert len(buffer.sub) == 4

    def test_unknown_kind(self, sel_setting):
        graph, view, prev = sel_setting
        with pytest.raises(ValueError, match="unknown baseline"):
            baseline_select("mystery", graph, view, prev, 4)

    def test_deterministic(self, sel_setting):
        graph, view, prev = sel_setting
        a = baseline_select("random", graph, view, prev, 9, seed=7)
        b = baseline_select("random", graph, view, prev, 9, seed=7)
        assert a.sub == b.sub


class TestConfigValidation:
    def test_p_must_exceed_m(self):
        with pytest.raises(ValueError, match="exceed"):
            SelectionConfig(m=10, p=10)

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            SelectionConfig(alpha=-0.5)

    def test_bad_enum_values(self):
        with pytest.raises(ValueError):
            SelectionConfig(partitioner="fancy")
        with pytest.raises(ValueError):
            SelectionConfig(scoring_mode="fast")
