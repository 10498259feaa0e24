import numpy as np
import pytest

from tgcl.backbone import Backbone, build_context, snapshot
from tgcl.graph import Event, NodeRecord, PeriodSpec, SynthConfig, TemporalGraph, generate_synthetic


def make_two_period_graph():
    """Hand-built graph: classes {0} in period 1, {1} in period 2.

    Period 2 contains one old-old edge, one old-new edge, one new-new edge.
    """
    nodes = [
        NodeRecord(id=0, class_id=0, birth_period=1, feature=np.array([0.0, 0.0])),
        NodeRecord(id=1, class_id=0, birth_period=1, feature=np.array([0.1, 0.0])),
        NodeRecord(id=2, class_id=1, birth_period=2, feature=np.array([1.0, 1.0])),
        NodeRecord(id=3, class_id=1, birth_period=2, feature=np.array([1.1, 1.0])),
    ]
    events = [
        Event(0, 1, 0.5),  # period 1 activity
        Event(0, 1, 1.2),  # old-old
        Event(0, 2, 1.5),  # old-new
        Event(2, 3, 1.8),  # new-new
    ]
    periods = [
        PeriodSpec(index=1, t_start=0.0, t_end=1.0, classes=(0,)),
        PeriodSpec(index=2, t_start=1.0, t_end=2.0, classes=(1,)),
    ]
    return TemporalGraph.from_parts(nodes, events, periods)


@pytest.fixture
def two_period_graph():
    return make_two_period_graph()


@pytest.fixture
def small_synth():
    return generate_synthetic(
        SynthConfig(
            num_periods=3,
            classes_per_period=2,
            nodes_per_class_per_period=30,
            feature_dim=4,
            seed=11,
        )
    )


def toy_model(feature_dim=3, hidden_dim=5, classes=(0, 1, 2), seed=0):
    model = Backbone(feature_dim, hidden_dim=hidden_dim, seed=seed)
    model.grow_head(list(classes))
    return model


def random_context(graph, node_id, eval_time):
    return build_context(graph, node_id, eval_time)


def finite_difference_grads(loss_fn, model, eps=1e-5):
    """Central finite differences of loss_fn() w.r.t. every model parameter."""
    grads = {}
    for name in ("w_agg", "w_hid", "b_hid", "w_head"):
        arr = getattr(model, name)
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads[name] = g
    return grads


def max_rel_error(a, b, floor=1e-6):
    """Max elementwise |a-b| / max(|a|, |b|, floor) over two grad dicts."""
    worst = 0.0
    for name in a:
        num = np.abs(a[name] - b[name])
        den = np.maximum(np.maximum(np.abs(a[name]), np.abs(b[name])), floor)
        if num.size:
            worst = max(worst, float((num / den).max()))
    return worst


def trained_toy_snapshot(graph, view, seed=0, steps=40, lr=0.2, hidden_dim=16):
    """Quickly fit a model on a view's training nodes; return its snapshot."""
    from tgcl.backbone import build_contexts, build_inputs, loss_and_grads_from_inputs

    feature_dim = next(iter(graph.nodes.values())).feature.shape[0]
    model = Backbone(feature_dim, hidden_dim=hidden_dim, seed=seed)
    classes = sorted({graph.nodes[v].class_id for v in view.nodes_of("all")})
    model.grow_head(classes)
    ids = view.nodes_of("all", "train")
    eval_t = graph.period(view.period_index).t_end
    z = build_inputs(build_contexts(graph, ids, eval_t))
    y = np.array([model.class_index(graph.nodes[v].class_id) for v in ids])
    for _ in range(steps):
        _, grads = loss_and_grads_from_inputs(model, z, y)
        model.apply_gradients(grads, lr)
    return snapshot(model)
