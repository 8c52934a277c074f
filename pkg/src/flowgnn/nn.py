"""Dense/sparse neural kernels with hand-written reverse-mode gradients.

Every layer is a pair of functions ``*_forward(...) -> (out, cache)`` and
``*_backward(dout, cache) -> (dinput, grads)``. The small ``Module`` classes
below hold parameters and gradient buffers and chain those functions.
All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

LEAKY_SLOPE = 0.2


class MissingCacheError(RuntimeError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {where}")
    return x


def relu(x):
    return np.maximum(x, 0.0)


class Param:
    """A trainable array and its gradient buffer (same shape)."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param(shape={self.value.shape})"


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_in, d_out))


# ---------------------------------------------------------------- linear


def linear_forward(x, weight, bias, activation="relu", err=None, err_weight=None):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    pre = x @ weight + bias
    if err_weight is not None:
        e = np.zeros(len(x)) if err is None else np.asarray(err, dtype=float)
        pre = pre + e[:, None] * err_weight[None, :]
    else:
        e = None
    if activation == "relu":
        out = relu(pre)
    elif activation == "none":
        out = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return check_finite(out, "linear"), (x, weight, pre, activation, e)


def linear_backward(dout, cache):
    if cache is None:
        raise MissingCacheError("linear_backward called before forward")
    x, weight, pre, activation, e = cache
    dpre = dout * (pre > 0) if activation == "relu" else dout
    grads = {"weight": x.T @ dpre, "bias": dpre.sum(axis=0)}
    if e is not None:
        grads["err_weight"] = e @ dpre
    return dpre @ weight.T, grads


# ------------------------------------------------------------------- gcn


def gcn_forward(h, norm_adj, weight):
    """relu(norm_adj @ h @ weight); bias-free."""
    if h.shape[0] != norm_adj.shape[0] or h.shape[1] != weight.shape[0]:
        raise ValueError(f"gcn: h {h.shape}, adj {norm_adj.shape}, weight {weight.shape}")
    ah = norm_adj @ h
    pre = ah @ weight
    return check_finite(relu(pre), "gcn"), (norm_adj, ah, pre, weight)


def gcn_backward(dout, cache):
    if cache is None:
        raise MissingCacheError("gcn_backward called before forward")
    norm_adj, ah, pre, weight = cache
    dpre = dout * (pre > 0)
    dweight = ah.T @ dpre
    dh = norm_adj.T @ (dpre @ weight.T)
    return np.asarray(dh), {"weight": dweight}


# ------------------------------------------------------------------- gat


@dataclass
class AttentionIndex:
    """Directed edge list (both directions plus self-loops) sorted by target node."""

    n_nodes: int
    dst: np.ndarray
    src: np.ndarray
    zeta: np.ndarray
    starts: np.ndarray
    scatter_src: sp.csr_matrix = field(repr=False)
    scatter_dst: sp.csr_matrix = field(repr=False)

    @classmethod
    def from_edges(cls, n_nodes: int, edges: np.ndarray, weights: np.ndarray) -> "AttentionIndex":
        i, j = edges[:, 0], edges[:, 1]
        loops = np.arange(n_nodes, dtype=np.int64)
        dst = np.concatenate([i, j, loops])
        src = np.concatenate([j, i, loops])
        zeta = np.concatenate([weights, weights, np.ones(n_nodes)])
        order = np.lexsort((src, dst))
        dst, src, zeta = dst[order], src[order], zeta[order]
        starts = np.searchsorted(dst, loops)
        m = len(dst)
        scatter_src = sp.csr_matrix((np.ones(m), (src, np.arange(m))), shape=(n_nodes, m))
        indptr = np.r_[starts, m]
        scatter_dst = sp.csr_matrix((np.ones(m), np.arange(m), indptr), shape=(n_nodes, m))
        return cls(n_nodes, dst, src, zeta, starts, scatter_src, scatter_dst)


def _leaky(x, slope):
    # valid for 0 <= slope <= 1
    return np.maximum(x, slope * x)


def gat_forward(h, index: AttentionIndex, weight, att, slope=LEAKY_SLOPE, use_similarity=True):
    """Single-head GATv2 layer with a shared projection.

    score(i, j) = att . leaky(W h_i + W h_j) [+ zeta_ij], softmax over j in
    N(i) + {i}, output relu(sum_j alpha_ij W h_j).
    """
    if h.shape[0] != index.n_nodes or h.shape[1] != weight.shape[0]:
        raise ValueError(f"gat: h {h.shape}, n_nodes {index.n_nodes}, weight {weight.shape}")
    proj = h @ weight
    s = proj[index.dst] + proj[index.src]
    u = _leaky(s, slope)
    score = u @ att
    if use_similarity:
        score = score + index.zeta
    smax = np.maximum.reduceat(score, index.starts)
    ex = np.exp(score - smax[index.dst])
    den = np.add.reduceat(ex, index.starts)
    alpha = ex / den[index.dst]
    agg = index.scatter_dst @ (alpha[:, None] * proj[index.src])
    out = relu(agg)
    cache = (h, index, weight, att, slope, proj, s, u, alpha, agg)
    return check_finite(out, "gat"), cache


def gat_backward(dout, cache):
    if cache is None:
        raise MissingCacheError("gat_backward called before forward")
    h, index, weight, att, slope, proj, s, u, alpha, agg = cache
    dagg = dout * (agg > 0)
    dagg_e = dagg[index.dst]
    dalpha = np.einsum("ij,ij->i", dagg_e, proj[index.src])
    dproj = index.scatter_src @ (alpha[:, None] * dagg_e)
    weighted = np.add.reduceat(alpha * dalpha, index.starts)
    dscore = alpha * (dalpha - weighted[index.dst])
    datt = u.T @ dscore
    ds = np.outer(dscore, att)
    ds[s <= 0] *= slope
    dproj = dproj + index.scatter_dst @ ds + index.scatter_src @ ds
    return dproj @ weight.T, {"weight": h.T @ dproj, "att": datt}


def attention_weights(h, index: AttentionIndex, weight, att, slope=LEAKY_SLOPE, use_similarity=True):
    """Per-edge alpha aligned with ``index.dst`` / ``index.src`` (for inspection)."""
    return gat_forward(h, index, weight, att, slope, use_similarity)[1][8]


# ------------------------------------------------------------------ loss


def cross_entropy_loss(logits, labels):
    """Mean negative log-softmax of the true class and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("cross_entropy_loss on an empty batch")
    if logits.shape != (n, logits.shape[1]):
        raise ValueError("logits/labels size mismatch")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# --------------------------------------------------------------- modules


class Module:
    def params(self) -> dict[str, Param]:
        raise NotImplementedError

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in, d_out, activation="relu", rng=None, error_term=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(glorot(rng, d_in, d_out))
        self.bias = Param(np.zeros(d_out))
        self.err_weight = Param(np.zeros(d_out)) if error_term else None
        self.activation = activation
        self._cache = None

    def params(self):
        p = {"weight": self.weight, "bias": self.bias}
        if self.err_weight is not None:
            p["err_weight"] = self.err_weight
        return p

    def forward(self, x, err=None):
        ew = self.err_weight.value if self.err_weight is not None else None
        out, self._cache = linear_forward(x, self.weight.value, self.bias.value, self.activation, err, ew)
        return out

    def backward(self, dout):
        dx, g = linear_backward(dout, self._cache)
        for k, v in g.items():
            self.params()[k].grad += v
        return dx


class GCNLayer(Module):
    def __init__(self, d_in, d_out, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(glorot(rng, d_in, d_out))
        self._cache = None

    def params(self):
        return {"weight": self.weight}

    def forward(self, h, norm_adj):
        out, self._cache = gcn_forward(h, norm_adj, self.weight.value)
        return out

    def backward(self, dout):
        dh, g = gcn_backward(dout, self._cache)
        self.weight.grad += g["weight"]
        return dh


class GATLayer(Module):
    def __init__(self, d_in, d_out, rng=None, slope=LEAKY_SLOPE, use_similarity=True):
        if not 0 <= slope <= 1:
            raise ValueError(f"leaky slope must lie in [0, 1], got {slope}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(glorot(rng, d_in, d_out))
        self.att = Param(glorot(rng, d_out, 1).ravel())
        self.slope = slope
        self.use_similarity = use_similarity
        self._cache = None

    def params(self):
        return {"weight": self.weight, "att": self.att}

    def forward(self, h, index: AttentionIndex):
        out, self._cache = gat_forward(h, index, self.weight.value, self.att.value,
                                       self.slope, self.use_similarity)
        return out

    def backward(self, dout):
        dh, g = gat_backward(dout, self._cache)
        self.weight.grad += g["weight"]
        self.att.grad += g["att"]
        return dh


class MLP(Module):
    """Stack of Linear layers; relu on hidden layers, ``last_activation`` on the final one."""

    def __init__(self, sizes, rng=None, last_activation="none", error_term=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = [
            Linear(a, b, "relu" if k < len(sizes) - 2 else last_activation, rng, error_term)
            for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def params(self):
        return {f"{k}.{name}": p for k, layer in enumerate(self.layers)
                for name, p in layer.params().items()}

    def forward(self, x, err=None):
        for layer in self.layers:
            x = layer.forward(x, err)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


# ------------------------------------------------------------------ adam


@dataclass
class Adam:
    """Bias-corrected Adam with decoupled weight decay."""

    params: dict[str, Param]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-6
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p.value))
            self.v.setdefault(k, np.zeros_like(p.value))

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.value -= self.lr * (update + self.weight_decay * p.value)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def adam_step(params: dict[str, Param], state: Adam | None = None, **hyper) -> Adam:
    """One optimizer step using the gradients already stored on ``params``."""
    if state is None:
        state = Adam(params, **hyper)
    state.step()
    return state


# -------------------------------------------------------- gradient check


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den < 1e-12 else float(num / den)
