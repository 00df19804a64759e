"""Small reverse-mode autodiff over numpy arrays, MLPs, a tanh-squashed
Gaussian policy and Adam.

A :class:`Graph` is built by running ordinary code on its nodes (define by
run).  Nodes are appended in creation order, which is a topological order,
so ``backward`` walks the list once in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
ACTION_BOUND = 1.0 - 1e-9
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    __slots__ = ("graph", "value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, graph, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.graph = graph
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.add(self, self.graph.neg(self._lift(other)))

    def __rsub__(self, other):
        return self.graph.add(self._lift(other), self.graph.neg(self))

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.neg(self)

    def __truediv__(self, other):
        return self.graph.mul(self, self.graph.reciprocal(self._lift(other)))

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- leaves -------------------------------------------------------------
    def _push(self, node):
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push(Node(self, np.asarray(value, dtype=float)))

    def param(self, value, name=None) -> Node:
        node = self._push(Node(self, np.asarray(value, dtype=float), requires_grad=True, name=name))
        if name is not None:
            self.params[name] = node
        return node

    def _op(self, value, parents, backward_fn):
        req = any(p.requires_grad for p in parents)
        return self._push(Node(self, value, parents, backward_fn if req else None, req))

    # -- elementwise --------------------------------------------------------
    def add(self, x, y):
        def bw(g):
            _accumulate(x, _unbroadcast(g, x.shape))
            _accumulate(y, _unbroadcast(g, y.shape))

        return self._op(x.value + y.value, (x, y), bw)

    def mul(self, x, y):
        def bw(g):
            _accumulate(x, _unbroadcast(g * y.value, x.shape))
            _accumulate(y, _unbroadcast(g * x.value, y.shape))

        return self._op(x.value * y.value, (x, y), bw)

    def neg(self, x):
        return self._op(-x.value, (x,), lambda g: _accumulate(x, -g))

    def square(self, x):
        return self._op(x.value * x.value, (x,), lambda g: _accumulate(x, 2.0 * x.value * g))

    def reciprocal(self, x):
        out = 1.0 / x.value
        return self._op(out, (x,), lambda g: _accumulate(x, -g * out * out))

    def exp(self, x):
        out = np.exp(x.value)
        return self._op(out, (x,), lambda g: _accumulate(x, g * out))

    def log(self, x):
        return self._op(np.log(x.value), (x,), lambda g: _accumulate(x, g / x.value))

    def tanh(self, x):
        out = np.tanh(x.value)
        return self._op(out, (x,), lambda g: _accumulate(x, g * (1.0 - out * out)))

    def relu(self, x):
        out = np.maximum(x.value, 0.0)
        return self._op(out, (x,), lambda g: _accumulate(x, g * (out > 0)))

    def softplus(self, x):
        v = x.value
        out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
        sig = 0.5 * (1.0 + np.tanh(0.5 * v))
        return self._op(out, (x,), lambda g: _accumulate(x, g * sig))

    def clip(self, x, lo, hi):
        mask = (x.value >= lo) & (x.value <= hi)
        return self._op(np.clip(x.value, lo, hi), (x,), lambda g: _accumulate(x, g * mask))

    def minimum(self, x, y):
        take_x = x.value <= y.value

        def bw(g):
            _accumulate(x, _unbroadcast(np.where(take_x, g, 0.0), x.shape))
            _accumulate(y, _unbroadcast(np.where(take_x, 0.0, g), y.shape))

        return self._op(np.minimum(x.value, y.value), (x, y), bw)

    # -- reductions and shape ---------------------------------------------
    def sum(self, x, axis=None):
        shape = x.shape

        def bw(g):
            if axis is None:
                _accumulate(x, np.broadcast_to(g, shape).copy())
            else:
                _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), shape).copy())

        return self._op(np.asarray(x.value.sum(axis=axis)), (x,), bw)

    def mean(self, x, axis=None):
        n = x.value.size if axis is None else x.shape[axis]
        return self.mul(self.sum(x, axis), self.constant(1.0 / n))

    def matmul(self, x, y):
        def bw(g):
            if x.requires_grad:
                _accumulate(x, g @ y.value.T)
            if y.requires_grad:
                _accumulate(y, x.value.T @ g)

        return self._op(x.value @ y.value, (x, y), bw)

    def concat(self, nodes, axis=-1):
        sizes = [n.shape[axis] for n in nodes]
        cuts = np.cumsum(sizes)[:-1]

        def bw(g):
            for n, piece in zip(nodes, np.split(g, cuts, axis=axis)):
                _accumulate(n, piece)

        return self._op(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), bw)

    def columns(self, x, start, stop):
        def bw(g):
            full = np.zeros_like(x.value)
            full[..., start:stop] = g
            _accumulate(x, full)

        return self._op(x.value[..., start:stop], (x,), bw)

    # -- driver -------------------------------------------------------------
    def backward(self, output: Node) -> dict:
        """Accumulate d output / d node into ``node.grad`` for every node that
        needs it and return the gradients of the named parameters."""
        if output.value.size != 1:
            raise ValueError("backward needs a scalar output")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        return {
            name: (np.zeros_like(n.value) if n.grad is None else n.grad)
            for name, n in self.params.items()
        }


def _accumulate(node, g):
    if not node.requires_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


def backward(graph: Graph, output: Node) -> dict:
    return graph.backward(output)


# ---------------------------------------------------------------------------
# networks


@dataclass
class MlpParams:
    """Fully connected net; relu on hidden layers, linear output."""

    weights: list
    biases: list

    @classmethod
    def init(cls, sizes, rng) -> "MlpParams":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    def __post_init__(self):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: input width {w.shape[0]} != previous output")

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> dict:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        n = len([k for k in arrays if k.startswith("W")])
        return cls([np.array(arrays[f"W{k}"]) for k in range(n)],
                   [np.array(arrays[f"b{k}"]) for k in range(n)])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def forward(params: MlpParams, x, graph: Graph | None = None, prefix: str | None = None) -> Node:
    """Run the MLP on ``x`` (node or array, shape (B, in)).

    When ``prefix`` is given, weights are registered as named parameters
    ``prefix/W0``, ``prefix/b0``, ... so ``backward`` returns their gradients.
    """
    if graph is None:
        graph = x.graph if isinstance(x, Node) else Graph()
    if not isinstance(x, Node):
        x = graph.constant(x)
    if x.shape[-1] != params.sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {params.sizes[0]}")
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        if prefix is None:
            wn, bn = graph.constant(w), graph.constant(b)
        else:
            wn, bn = graph.param(w, f"{prefix}/W{k}"), graph.param(b, f"{prefix}/b{k}")
        h = graph.add(graph.matmul(h, wn), bn)
        if k < last:
            h = graph.relu(h)
    return h


def torsion_features(torsions) -> np.ndarray:
    """[sin d, cos d] per torsion; works on a vector or a (B, M) batch."""
    d = np.asarray(torsions, dtype=float)
    return np.concatenate([np.sin(d), np.cos(d)], axis=-1)


@dataclass
class GaussianPolicy:
    trunk: MlpParams
    action_dim: int

    @classmethod
    def init(cls, state_dim, action_dim, hidden, rng) -> "GaussianPolicy":
        return cls(MlpParams.init([state_dim, *hidden, 2 * action_dim], rng), action_dim)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.trunk.copy(), self.action_dim)


def policy_head(policy: GaussianPolicy, state_features, graph: Graph, prefix=None):
    """(mean, clamped log-std) nodes, each (B, M)."""
    out = forward(policy.trunk, state_features, graph, prefix)
    m = policy.action_dim
    mu = graph.columns(out, 0, m)
    log_std = graph.clip(graph.columns(out, m, 2 * m), LOG_STD_MIN, LOG_STD_MAX)
    return mu, log_std


def policy_sample(policy: GaussianPolicy, state_features, noise, graph: Graph | None = None,
                  prefix: str | None = None):
    """Reparameterised draw: action = tanh(mu + sigma * eps).

    Returns (action, log_prob) nodes.  log_prob is the density of the squashed
    action: Gaussian log-density of the pre-squash sample minus
    sum log(1 - tanh^2), the latter written as 2 (log 2 - u - softplus(-2u))
    so it stays finite for large |u|.
    """
    graph = graph or Graph()
    feats = np.atleast_2d(np.asarray(state_features, dtype=float))
    eps = np.asarray(noise, dtype=float).reshape(feats.shape[0], policy.action_dim)
    mu, log_std = policy_head(policy, feats, graph, prefix)
    eps_node = graph.constant(eps)
    pre = graph.add(mu, graph.mul(graph.exp(log_std), eps_node))
    action = graph.clip(graph.tanh(pre), -ACTION_BOUND, ACTION_BOUND)

    gauss = graph.neg(graph.add(log_std, graph.constant(0.5 * eps * eps + _HALF_LOG_2PI)))
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    log_jac = graph.mul(
        graph.add(graph.constant(_LOG2), graph.neg(graph.add(pre, graph.softplus(graph.mul(pre, graph.constant(-2.0)))))),
        graph.constant(2.0),
    )
    log_prob = graph.sum(graph.add(gauss, graph.neg(log_jac)), axis=1)
    return action, log_prob


def deterministic_action(policy: GaussianPolicy, state_features) -> np.ndarray:
    """tanh(mu): the evaluation-time action, no sampling."""
    g = Graph()
    mu, _ = policy_head(policy, np.atleast_2d(state_features), g)
    return np.clip(np.tanh(mu.value), -ACTION_BOUND, ACTION_BOUND)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, lr: float, state: AdamState) -> dict:
    """In-place Adam update of the named arrays in ``params``; returns ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def named_arrays(prefix: str, net: MlpParams) -> dict:
    """View of a network's arrays keyed like the graph parameters (no copies)."""
    return {f"{prefix}/{k}": v for k, v in net.arrays().items()}


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "pmpfold-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict) -> None:
    """Write named arrays to an ``.npz`` file with a format tag and version."""
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__format__"] = np.array(CHECKPOINT_FORMAT)
    payload["__version__"] = np.array(CHECKPOINT_VERSION)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        if str(data.get("__format__", "")) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return {k: data[k].copy() for k in data.files if not k.startswith("__")}
