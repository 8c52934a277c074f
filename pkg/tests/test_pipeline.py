import math

import numpy as np
import pytest
from helpers import random_records
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_diff, rel_err

from flowgnn.eval import compute_metrics
from flowgnn.graph import FlowGraph, build_flow_graph
from flowgnn.ingest import MALICIOUS, NORMAL
from flowgnn.nn import cross_entropy_loss
from flowgnn.pipeline import (
    FlowGNN,
    ModelConfig,
    TrainingDiverged,
    alert_count,
    classify,
    classify_graphs,
    train,
)

SMALL = dict(gsa_sizes=(6, 5), gcn_sizes=(4, 4), gat_size=3, scorer_sizes=(4,))


def graph_from(rng, n=12, k=4, d=3):
    rs = random_records(rng, n, k, n_features=d)
    x = np.asarray([r.features for r in rs])
    return build_flow_graph(rs, x)


def edgeless(x, labels=None):
    n = len(x)
    return FlowGraph(n, np.zeros((0, 2), np.int64), np.zeros(0), x, labels)


def test_config_round_trip_and_validation():
    c = ModelConfig(gsa_sizes=[8, 4], lr=0.01)
    assert ModelConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"colour": 1})
    with pytest.raises(ValueError):
        ModelConfig(gcn_sizes=(8,))
    with pytest.raises(ValueError):
        ModelConfig(key_mode="mac")


def test_forward_shape_and_feature_check():
    rng = np.random.default_rng(0)
    g = graph_from(rng)
    m = FlowGNN(ModelConfig(**SMALL), 3)
    assert m.forward(g).shape == (12, 2)
    with pytest.raises(ValueError, match="dim"):
        FlowGNN(ModelConfig(**SMALL), 4).forward(g)


def test_edgeless_graph_is_per_flow():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 3))
    m = FlowGNN(ModelConfig(**SMALL), 3)
    full = m.scores(edgeless(x))
    for i in range(5):
        assert m.scores(edgeless(x[i:i + 1]))[0] == pytest.approx(full[i], abs=1e-12)


def test_branch_isolation_reduces_to_mlp():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, 3))
    cfg = ModelConfig(**SMALL, weighted=False, similarity_attention=False)
    m = FlowGNN(cfg, 3)
    p = {k: v.value for k, v in m.params().items()}
    relu = lambda a: np.maximum(a, 0)  # noqa: E731
    z = relu(relu(x @ p["gsa.0.weight"] + p["gsa.0.bias"]) @ p["gsa.1.weight"] + p["gsa.1.bias"])
    sfe = relu(relu(z @ p["gcn1.weight"]) @ p["gcn2.weight"])
    afe = relu(z @ p["gat.weight"])
    h = np.hstack([sfe, afe])
    h = relu(h @ p["scorer.0.weight"] + p["scorer.0.bias"])
    logits = h @ p["scorer.1.weight"] + p["scorer.1.bias"]
    assert np.allclose(m.forward(edgeless(x)), logits, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    rs = random_records(rng, 15, 4, n_features=3)
    x = np.asarray([r.features for r in rs])
    perm = rng.permutation(15)
    m = FlowGNN(ModelConfig(**SMALL, seed=seed % 7), 3)
    s = m.scores(build_flow_graph(rs, x))
    s_perm = m.scores(build_flow_graph([rs[i] for i in perm], x[perm]))
    assert np.allclose(s_perm, s[perm], atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("weighted", [True, False])
def test_full_model_gradients(seed, weighted):
    rng = np.random.default_rng(600 + seed)
    g = graph_from(rng, n=8, k=3)
    labels = rng.integers(0, 2, 8)
    m = FlowGNN(ModelConfig(**SMALL, seed=seed, weighted=weighted, similarity_attention=weighted), 3)
    # zero-initialised biases put dead units exactly on the relu kink
    for k, p in m.params().items():
        if k.endswith("bias"):
            p.value[...] = rng.normal(scale=0.5, size=p.value.shape)

    def loss():
        return cross_entropy_loss(m.forward(g), labels)[0]

    m.zero_grad()
    _, d = cross_entropy_loss(m.forward(g), labels)
    m.backward(d)
    for name, p in m.params().items():
        fd = central_diff(loss, p.value)
        assert rel_err(p.grad, fd) < 1e-4, name


def test_error_term_path():
    rng = np.random.default_rng(3)
    g = graph_from(rng)
    m = FlowGNN(ModelConfig(**SMALL, error_term=True), 3)
    assert any(k.endswith("err_weight") for k in m.params())
    err = rng.normal(size=g.n_nodes)
    assert m.forward(g, err).shape == (g.n_nodes, 2)


def _separable(rng, n):
    x = rng.normal(size=(n, 4))
    y = (x @ np.array([1.0, -2.0, 0.5, 1.0]) > 0).astype(np.int64)
    x += np.outer(2 * y - 1, [1.0, -2.0, 0.5, 1.0]) * 0.3
    return x, y


def test_learns_linearly_separable_without_edges():
    rng = np.random.default_rng(4)
    x, y = _separable(rng, 300)
    cfg = ModelConfig(**SMALL, lr=1e-2, epochs=200)
    res = train([edgeless(x, y)], cfg)
    xt, yt = _separable(rng, 300)
    rep = compute_metrics(classify(edgeless(xt, yt), res.model, 0.0))
    assert rep.f1 >= 0.99


def test_training_reproducible():
    rng = np.random.default_rng(5)
    g = graph_from(rng, n=30, k=5)
    cfg = ModelConfig(**SMALL, lr=1e-2, epochs=5, seed=3)
    a, b = train([g], cfg), train([g], cfg)
    assert a.losses == b.losses
    assert all(np.array_equal(p.value, b.model.params()[k].value) for k, p in a.model.params().items())


def test_early_stopping_restores_best():
    rng = np.random.default_rng(6)
    x, y = _separable(rng, 100)
    xv, yv = _separable(rng, 100)
    cfg = ModelConfig(**SMALL, lr=1e-2, epochs=60, patience=5)
    res = train([edgeless(x, y)], cfg, [edgeless(xv, yv)])
    best = max(h["val_f1"] for h in res.history)
    assert res.history[res.best_epoch]["val_f1"] == best
    assert len(res.history) <= 60
    assert compute_metrics(classify(edgeless(xv, yv), res.model, 0.0)).f1 == pytest.approx(best)


def test_nan_loss_aborts_with_guidance():
    rng = np.random.default_rng(7)
    x, y = _separable(rng, 50)
    cfg = ModelConfig(**SMALL, lr=1e12, epochs=50)
    with pytest.raises(TrainingDiverged, match="learning rate"):
        train([edgeless(x * 1e3, y)], cfg)


def test_training_requires_labels():
    with pytest.raises(ValueError, match="labels"):
        train([edgeless(np.ones((3, 3)))], ModelConfig(**SMALL))


def test_threshold_extremes():
    rng = np.random.default_rng(8)
    g = graph_from(rng)
    m = FlowGNN(ModelConfig(**SMALL), 3)
    assert alert_count(classify(g, m, math.inf)) == 0
    assert alert_count(classify(g, m, -math.inf)) == g.n_nodes


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), thresholds=st.lists(st.floats(-5, 5), min_size=2, max_size=10))
def test_alert_count_non_increasing(seed, thresholds):
    g = graph_from(np.random.default_rng(seed))
    m = FlowGNN(ModelConfig(**SMALL, seed=seed % 5), 3)
    counts = [alert_count(classify(g, m, s)) for s in sorted(thresholds)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_classify_uses_provenance_and_labels():
    rng = np.random.default_rng(9)
    g = graph_from(rng)
    g.provenance = np.arange(100, 112)
    out = classify_graphs([g], FlowGNN(ModelConfig(**SMALL), 3), 0.0)
    assert [f.index for f in out] == list(range(100, 112))
    assert all(f.label in (NORMAL, MALICIOUS) for f in out)
    assert all(f.decision == (MALICIOUS if f.score > 0 else NORMAL) for f in out)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    g = graph_from(rng)
    m = FlowGNN(ModelConfig(**SMALL, seed=4), 3)
    m.save(tmp_path / "m.ckpt", extra={"note": "x"})
    back, extra = FlowGNN.load(tmp_path / "m.ckpt")
    assert extra == {"note": "x"}
    assert np.array_equal(back.scores(g), m.scores(g))
    back.save(tmp_path / "m2.ckpt", extra={"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_shape_validation(tmp_path):
    from flowgnn import blob

    m = FlowGNN(ModelConfig(**SMALL), 3)
    m.save(tmp_path / "m.ckpt")
    meta, arrays = blob.load(tmp_path / "m.ckpt", "flowgnn-checkpoint")
    arrays["gat.att"] = np.zeros(7)
    blob.save(tmp_path / "bad.ckpt", "flowgnn-checkpoint", meta, arrays)
    with pytest.raises(ValueError, match="gat.att"):
        FlowGNN.load(tmp_path / "bad.ckpt")
    del arrays["gat.att"]
    blob.save(tmp_path / "bad2.ckpt", "flowgnn-checkpoint", meta, arrays)
    with pytest.raises(ValueError, match="do not match"):
        FlowGNN.load(tmp_path / "bad2.ckpt")
