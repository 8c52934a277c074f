import math

import numpy as np
import pytest
import scipy.sparse as sp
from oracles import central_diff, gat_loops, matmul_loops, rel_err

from flowgnn.graph import FlowGraph, adjacency_with_self_loops
from flowgnn.nn import (
    MLP,
    Adam,
    AttentionIndex,
    GATLayer,
    GCNLayer,
    Linear,
    MissingCacheError,
    Param,
    attention_weights,
    cross_entropy_loss,
    gat_backward,
    gat_forward,
    gcn_backward,
    gcn_forward,
    linear_backward,
    linear_forward,
)

GRAD_TOL = 1e-4
N_INSTANCES = 20


def random_graph(rng, n, p=0.4):
    edges = np.asarray([(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p],
                       dtype=np.int64).reshape(-1, 2)
    return FlowGraph(n, edges, rng.uniform(-1, 1, len(edges)), np.zeros((n, 1)))


def away_from_kinks(values, margin=1e-3):
    return np.all(np.abs(values) > margin)


# ---------------------------------------------------------------- linear


def test_linear_relu_clamp():
    out, _ = linear_forward(np.array([[-1.0, 2.0]]), np.eye(2), np.zeros(2), "relu")
    assert out.tolist() == [[0.0, 2.0]]


def test_linear_zero_weight_bias_only():
    out, _ = linear_forward(np.ones((4, 3)), np.zeros((3, 1)), np.array([3.0]), "none")
    assert out.tolist() == [[3.0]] * 4


def test_linear_matches_loop_product():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    out, _ = linear_forward(x, w, np.zeros(2), "none")
    assert np.allclose(out, matmul_loops(x.tolist(), w.tolist()), atol=1e-14)


def test_linear_shape_error():
    with pytest.raises(ValueError):
        linear_forward(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))


def test_backward_before_forward():
    with pytest.raises(MissingCacheError):
        linear_backward(np.ones((1, 1)), None)
    with pytest.raises(MissingCacheError):
        gcn_backward(np.ones((1, 1)), None)
    with pytest.raises(MissingCacheError):
        gat_backward(np.ones((1, 1)), None)


def test_non_finite_output_raises():
    with pytest.raises(FloatingPointError):
        linear_forward(np.array([[np.inf]]), np.ones((1, 1)), np.zeros(1), "none")


@pytest.mark.parametrize("seed", range(N_INSTANCES))
@pytest.mark.parametrize("activation", ["relu", "none"])
def test_linear_gradients(seed, activation):
    rng = np.random.default_rng(seed)
    n, d_in, d_out = rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 5)
    x, w, b = rng.normal(size=(n, d_in)), rng.normal(size=(d_in, d_out)), rng.normal(size=d_out)
    err, ew = rng.normal(size=n), rng.normal(size=d_out)
    r = rng.normal(size=(n, d_out))

    def loss():
        return float(np.sum(linear_forward(x, w, b, activation, err, ew)[0] * r))

    out, cache = linear_forward(x, w, b, activation, err, ew)
    if activation == "relu" and not away_from_kinks(cache[2]):
        pytest.skip("pre-activation too close to the relu kink")
    dx, g = linear_backward(r, cache)
    for analytic, wrt in ((dx, x), (g["weight"], w), (g["bias"], b), (g["err_weight"], ew)):
        assert rel_err(analytic, central_diff(loss, wrt)) < GRAD_TOL


def test_linear_zero_upstream_zero_grads():
    rng = np.random.default_rng(1)
    _, cache = linear_forward(rng.normal(size=(3, 2)), rng.normal(size=(2, 2)), np.zeros(2))
    dx, g = linear_backward(np.zeros((3, 2)), cache)
    assert not dx.any() and not g["weight"].any() and not g["bias"].any()


# ------------------------------------------------------------------- gcn


def test_gcn_single_node_is_linear():
    h, w = np.array([[1.0, -2.0]]), np.array([[1.0], [1.0]])
    out, _ = gcn_forward(h, sp.csr_matrix([[1.0]]), w)
    assert out.tolist() == [[0.0]]
    out, _ = gcn_forward(-h, sp.csr_matrix([[1.0]]), w)
    assert out.tolist() == [[1.0]]


def test_gcn_two_node_hand_case():
    adj = sp.csr_matrix(np.full((2, 2), 0.5))
    _, cache = gcn_forward(np.array([[2.0, 0.0], [0.0, 2.0]]), adj, np.eye(2))
    assert cache[2].tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_gcn_no_edges_equals_per_node_linear():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 6, p=0.0)
    h, w = rng.normal(size=(6, 3)), rng.normal(size=(3, 4))
    out, _ = gcn_forward(h, adjacency_with_self_loops(g), w)
    assert np.allclose(out, np.maximum(h @ w, 0), atol=1e-15)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_gcn_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(1, 8))
    adj = adjacency_with_self_loops(random_graph(rng, n), weighted=bool(seed % 2))
    h, w = rng.normal(size=(n, 3)), rng.normal(size=(3, 2))
    r = rng.normal(size=(n, 2))

    def loss():
        return float(np.sum(gcn_forward(h, adj, w)[0] * r))

    _, cache = gcn_forward(h, adj, w)
    if not away_from_kinks(cache[2]):
        pytest.skip("pre-activation too close to the relu kink")
    dh, g = gcn_backward(r, cache)
    assert rel_err(dh, central_diff(loss, h)) < GRAD_TOL
    assert rel_err(g["weight"], central_diff(loss, w)) < GRAD_TOL


# ------------------------------------------------------------------- gat


def _index(g):
    return AttentionIndex.from_edges(g.n_nodes, g.edges, g.weights)


def test_gat_isolated_node():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 1)
    h, w, a = rng.normal(size=(1, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    out, _ = gat_forward(h, _index(g), w, a)
    assert attention_weights(h, _index(g), w, a).tolist() == [1.0]
    assert np.allclose(out, np.maximum(h @ w, 0))


def test_gat_symmetric_neighbours_equal_weights():
    g = FlowGraph(3, np.array([[0, 1], [0, 2], [1, 2]]), np.ones(3), np.zeros((3, 1)))
    h = np.ones((3, 2))
    alpha = attention_weights(h, _index(g), np.eye(2), np.array([0.3, -0.7]))
    assert np.allclose(alpha, 1 / 3, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_gat_matches_loop_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    g = random_graph(rng, 6)
    idx = _index(g)
    h, w, a = rng.normal(size=(6, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    use_sim = bool(seed % 2)
    out, _ = gat_forward(h, idx, w, a, 0.2, use_sim)
    want, alphas = gat_loops(h, w, a, 6, g.edges, g.weights, 0.2, use_sim)
    assert np.allclose(out, want, atol=1e-12)
    alpha = attention_weights(h, idx, w, a, 0.2, use_sim)
    for d, s, al in zip(idx.dst, idx.src, alpha):
        assert al == pytest.approx(alphas[(int(d), int(s))], abs=1e-12)
    sums = np.bincount(idx.dst, weights=alpha, minlength=6)
    assert np.allclose(sums, 1.0, atol=1e-12)


def test_gat_similarity_flag_changes_attention():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 5, p=0.9)
    h, w, a = rng.normal(size=(5, 2)), rng.normal(size=(2, 2)), rng.normal(size=2)
    on = attention_weights(h, _index(g), w, a, use_similarity=True)
    off = attention_weights(h, _index(g), w, a, use_similarity=False)
    assert not np.allclose(on, off)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_gat_gradients(seed):
    rng = np.random.default_rng(300 + seed)
    n = int(rng.integers(1, 7))
    g = random_graph(rng, n, p=0.5)
    idx = _index(g)
    h, w, a = rng.normal(size=(n, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    use_sim = bool(seed % 2)
    r = rng.normal(size=(n, 2))

    def loss():
        return float(np.sum(gat_forward(h, idx, w, a, 0.2, use_sim)[0] * r))

    _, cache = gat_forward(h, idx, w, a, 0.2, use_sim)
    proj = h @ w
    s = proj[idx.dst] + proj[idx.src]
    if not away_from_kinks(s):
        pytest.skip("attention input too close to the leaky-relu kink")
    dh, grads = gat_backward(r, cache)
    assert rel_err(dh, central_diff(loss, h)) < GRAD_TOL
    assert rel_err(grads["weight"], central_diff(loss, w)) < GRAD_TOL
    assert rel_err(grads["att"], central_diff(loss, a)) < GRAD_TOL


def test_gat_rejects_bad_slope():
    with pytest.raises(ValueError):
        GATLayer(2, 2, slope=1.5)


# ----------------------------------------------------------------- loss


def test_loss_uniform_logits():
    for label in (0, 1):
        loss, _ = cross_entropy_loss(np.zeros((1, 2)), [label])
        assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_loss_saturated_correct():
    loss, grad = cross_entropy_loss(np.array([[100.0, -100.0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_loss_gradients(seed):
    rng = np.random.default_rng(400 + seed)
    n = int(rng.integers(1, 10))
    logits = rng.normal(scale=3, size=(n, 2))
    labels = rng.integers(0, 2, n)
    _, grad = cross_entropy_loss(logits, labels)
    fd = central_diff(lambda: cross_entropy_loss(logits, labels)[0], logits)
    assert rel_err(grad, fd) < 1e-5


# --------------------------------------------------------------- scorer


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_scorer_mlp_gradients(seed):
    rng = np.random.default_rng(500 + seed)
    mlp = MLP([4, 5, 3, 2], rng)
    n = int(rng.integers(2, 8))
    x = rng.normal(size=(n, 4))
    labels = rng.integers(0, 2, n)

    def loss():
        return cross_entropy_loss(mlp.forward(x), labels)[0]

    mlp.zero_grad()
    _, dlogits = cross_entropy_loss(mlp.forward(x), labels)
    pre = [layer._cache[2] for layer in mlp.layers[:-1]]
    if not all(away_from_kinks(p) for p in pre):
        pytest.skip("hidden pre-activation too close to the relu kink")
    dx = mlp.backward(dlogits)
    assert rel_err(dx, central_diff(loss, x)) < GRAD_TOL
    for name, p in mlp.params().items():
        assert rel_err(p.grad, central_diff(loss, p.value)) < GRAD_TOL, name


# ------------------------------------------------------------------ adam


def test_adam_zero_grad_only_decays():
    p = Param(np.array([1.0, -2.0]))
    opt = Adam({"p": p}, lr=0.1, weight_decay=0.01)
    opt.step()
    assert np.allclose(p.value, [1.0 - 0.1 * 0.01, -2.0 + 0.1 * 0.01 * 2], atol=1e-15)


def test_adam_first_step_hand_formula():
    p = Param(np.array([0.5, 0.5]))
    p.grad[...] = [0.2, -3.0]
    opt = Adam({"p": p}, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0)
    opt.step()
    # fresh moments: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = 0.5 - 1e-3 * np.array([0.2, -3.0]) / (np.abs([0.2, -3.0]) + 1e-8)
    assert np.allclose(p.value, expected, atol=1e-15)


def test_adam_two_steps_hand_formula():
    p = Param(np.array([1.0]))
    opt = Adam({"p": p}, lr=0.01, beta1=0.9, beta2=0.98, eps=0.0, weight_decay=0.0)
    for g in (1.0, 3.0):
        p.grad[...] = g
        opt.step()
    m = 0.1 * 1.0 * 0.9 + 0.1 * 3.0
    v = 0.02 * 1.0 * 0.98 + 0.02 * 9.0
    step2 = (m / (1 - 0.81)) / math.sqrt(v / (1 - 0.98 ** 2))
    assert p.value[0] == pytest.approx(1.0 - 0.01 - 0.01 * step2, abs=1e-15)


def test_training_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(9)
        mlp = MLP([3, 4, 2], np.random.default_rng(0))
        x, y = rng.normal(size=(20, 3)), rng.integers(0, 2, 20)
        opt = Adam(mlp.params(), lr=0.01)
        for _ in range(15):
            opt.zero_grad()
            _, d = cross_entropy_loss(mlp.forward(x), y)
            mlp.backward(d)
            opt.step()
        return {k: p.value.copy() for k, p in mlp.params().items()}

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_modules_accumulate_and_zero():
    rng = np.random.default_rng(5)
    lin = Linear(2, 2, "none", rng)
    x = rng.normal(size=(3, 2))
    lin.forward(x)
    lin.backward(np.ones((3, 2)))
    first = lin.weight.grad.copy()
    lin.forward(x)
    lin.backward(np.ones((3, 2)))
    assert np.allclose(lin.weight.grad, 2 * first)
    lin.zero_grad()
    assert not lin.weight.grad.any()


def test_gcn_layer_module():
    rng = np.random.default_rng(6)
    layer = GCNLayer(3, 2, rng)
    adj = adjacency_with_self_loops(random_graph(rng, 4))
    out = layer.forward(rng.normal(size=(4, 3)), adj)
    assert out.shape == (4, 2)
    layer.backward(np.ones((4, 2)))
    assert layer.weight.grad.shape == (3, 2)
