"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything downstream (encoder, graph classifier generator, episodic
training) is built from the ops in this module.  Design points:

* values are float64 ndarrays; every op output is checked for NaN/Inf and
  raises ``NumericalError`` instead of propagating garbage,
* the backward pass walks an explicit tape (iterative topo sort, no
  recursion limits),
* reductions that aggregate an *unordered* set of contributions (graph
  neighborhoods, relation-pair means, softmax denominators) sort the
  contributions by value before summing, which makes those ops bitwise
  insensitive to input ordering -- required for the exact permutation
  equivariance contracts,
* gradients are plain ndarrays; meta-gradients are first-order (inner-loop
  updates subtract detached gradients), so no grad-of-grad support.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "Rng", "Tensor", "backward", "grad",
    "add", "sub", "mul", "scale", "neg", "matmul", "transpose", "affine",
    "relu", "leaky_relu", "dropout", "softmax_rows", "cross_entropy",
    "l2_normalize_rows", "gather_rows", "write_rows", "sym_neighbor_mean",
    "concat_rows", "concat_cols", "slice_cols", "reshape", "stack_rows", "mean_rows",
    "grouped_mean", "sum_all", "mean_all", "stop_gradient",
    "glorot_uniform", "SgdOptimizer",
]


def _key_int(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


class Rng:
    """Deterministic random stream: same seed + same call sequence -> same values.

    ``child(*keys)`` derives an independent stream from (seed, key path)
    without advancing this one, so sub-streams can be re-derived exactly.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed)
        self.key = tuple(_key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self.key + tuple(_key_int(k) for k in keys))

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size, replace=False):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def get_state(self):
        return self._gen.bit_generator.state

    def set_state(self, state):
        self._gen.bit_generator.state = state


def _as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """Node in the computation tape: a float64 array plus backward metadata."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, _op="leaf"):
        self.data = _as_f64(data)
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values produced by '{_op}'")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(data, parents, vjp, op):
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, tuple(parents) if rg else (), vjp if rg else None, op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
                 "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
                 "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)),
                 "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _node(out, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g),
                 "matmul")


def transpose(x: Tensor) -> Tensor:
    return _node(x.data.T, (x,), lambda g: (g.T,), "transpose")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows (fused for tape economy)."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"affine dimension mismatch: {x.data.shape} @ {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(f"affine bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out = x.data @ w.data + b.data
    return _node(out, (x, w, b),
                 lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
                 "affine")


# ---------------------------------------------------------------------------
# nonlinearities

def relu(x: Tensor) -> Tensor:
    # subgradient convention at 0: positive branch (slope 1)
    mask = (x.data >= 0).astype(np.float64)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    mask = np.where(x.data >= 0, 1.0, float(slope))
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "leaky_relu")


def dropout(x: Tensor, keep_prob: float, rng: Rng, training: bool) -> Tensor:
    """Inverted dropout: kept entries scaled by 1/keep_prob; identity in eval mode."""
    if not (0.0 < keep_prob <= 1.0):
        raise ConfigError(f"dropout keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    mask = (rng.uniform(size=x.data.shape) < keep_prob) / keep_prob
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# rows / columns plumbing

def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(f"gather_rows index out of range for {x.data.shape[0]} rows")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)  # duplicate indices accumulate
        return (gx,)

    return _node(x.data[idx], (x,), vjp, "gather_rows")


def write_rows(x: Tensor, rows: Tensor, idx) -> Tensor:
    """Copy of x with rows[i] written at idx[i]; differentiable in both args."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("write_rows requires distinct row indices")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(f"write_rows index out of range for {x.data.shape[0]} rows")
    out = x.data.copy()
    out[idx] = rows.data

    def vjp(g):
        gx = g.copy()
        gx[idx] = 0.0
        return gx, g[idx]

    return _node(out, (x, rows), vjp, "write_rows")


def concat_rows(*xs: Tensor) -> Tensor:
    out = np.concatenate([x.data for x in xs], axis=0)
    sizes = [x.data.shape[0] for x in xs]

    def vjp(g):
        pieces, at = [], 0
        for n in sizes:
            pieces.append(g[at:at + n])
            at += n
        return tuple(pieces)

    return _node(out, xs, vjp, "concat_rows")


def concat_cols(*xs: Tensor) -> Tensor:
    out = np.concatenate([x.data for x in xs], axis=1)
    widths = [x.data.shape[1] for x in xs]

    def vjp(g):
        pieces, at = [], 0
        for w in widths:
            pieces.append(g[:, at:at + w])
            at += w
        return tuple(pieces)

    return _node(out, xs, vjp, "concat_cols")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.data.shape[1]):
        raise IndexError(f"slice_cols [{start}:{stop}] out of range for width {x.data.shape[1]}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _node(x.data[:, start:stop].copy(), (x,), vjp, "slice_cols")


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def stack_rows(vectors) -> Tensor:
    vectors = tuple(vectors)
    out = np.stack([v.data for v in vectors], axis=0)
    return _node(out, vectors, lambda g: tuple(g[i] for i in range(len(vectors))), "stack_rows")


def mean_rows(x: Tensor) -> Tensor:
    n = x.data.shape[0]
    return _node(x.data.mean(axis=0), (x,),
                 lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),),
                 "mean_rows")


def grouped_mean(x: Tensor, group_size: int) -> Tensor:
    """Mean over consecutive row blocks: (G*B, d) -> (G, d).

    Each block's contributions are sorted by value before summation, so the
    result does not depend on the order of rows within a block.
    """
    total, d = x.data.shape
    if group_size <= 0 or total % group_size:
        raise ValueError(f"grouped_mean: {total} rows not divisible into blocks of {group_size}")
    blocks = x.data.reshape(-1, group_size, d)
    out = np.sort(blocks, axis=1).sum(axis=1) / group_size

    def vjp(g):
        return (np.repeat(g / group_size, group_size, axis=0),)

    return _node(out, (x,), vjp, "grouped_mean")


def sum_all(x: Tensor) -> Tensor:
    return _node(x.data.sum(), (x,), lambda g: (np.full_like(x.data, float(g)),), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(x.data.mean(), (x,), lambda g: (np.full_like(x.data, float(g) / n),), "mean_all")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# normalization / losses

def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Each row divided by max(row L2 norm, eps); zero rows stay zero."""
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = x.data / denom

    def vjp(g):
        dot = np.sum(x.data * g, axis=1, keepdims=True)
        # norm branch: g/n - x (x.g)/n^3 ; clamped branch: constant denominator
        gx = np.where(norms > eps, g / denom - x.data * dot / denom ** 3, g / denom)
        return (gx,)

    return _node(out, (x,), vjp, "l2_normalize_rows")


def _stable_exp_parts(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    # sort before summing: denominator is invariant to class column order
    s = np.sort(e, axis=1).sum(axis=1, keepdims=True)
    return z, e, s


def softmax_rows(x: Tensor) -> Tensor:
    _, e, s = _stable_exp_parts(x.data)
    p = e / s

    def vjp(g):
        dot = np.sum(g * p, axis=1, keepdims=True)
        return (p * (g - dot),)

    return _node(p, (x,), vjp, "softmax_rows")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; numerically stabilized by row-max subtraction."""
    y = np.asarray(labels, dtype=np.intp)
    n, c = logits.data.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match {n} logit rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    z, e, s = _stable_exp_parts(logits.data)
    lse = np.log(s[:, 0])
    out = (lse - z[np.arange(n), y]).mean()

    def vjp(g):
        p = e / s
        p[np.arange(n), y] -= 1.0
        return (p * (float(g) / n),)

    return _node(out, (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------------------
# graph neighborhood averaging

def sym_neighbor_mean(x: Tensor, nbr_idx, degrees) -> Tensor:
    """Row-normalized neighborhood sum over a *symmetric* adjacency structure.

    ``nbr_idx`` is (n, max_deg) with entries in [0, n) and n as padding;
    ``degrees`` the true neighbor counts.  out[i] = sum(x[j] for j in N(i)) / deg[i].
    Contributions are sorted by value before summation so the result is
    bitwise invariant under node relabeling.  Symmetry of the structure is
    assumed (undirected edges), which makes the backward pass reuse the same
    index table.
    """
    nbr_idx = np.asarray(nbr_idx, dtype=np.intp)
    degrees = np.asarray(degrees, dtype=np.float64)
    n = x.data.shape[0]
    if (degrees <= 0).any():
        raise NumericalError("neighborhood averaging with a zero-degree node")

    def agg(values):
        padded = np.concatenate([values, np.zeros((1, values.shape[1]))], axis=0)
        contrib = padded[nbr_idx]                      # (n, max_deg, d)
        return np.sort(contrib, axis=1).sum(axis=1)

    out = agg(x.data) / degrees[:, None]

    def vjp(g):
        return (agg(g / degrees[:, None]),)

    return _node(out, (x,), vjp, "sym_neighbor_mean")


# ---------------------------------------------------------------------------
# parameters and optimization

def glorot_uniform(rng: Rng, n_in: int, n_out: int) -> Tensor:
    """Weight init: uniform in [-a, a], a = sqrt(6 / (n_in + n_out))."""
    a = np.sqrt(6.0 / (n_in + n_out))
    return Tensor(rng.uniform(size=(n_in, n_out), low=-a, high=a), requires_grad=True)


class SgdOptimizer:
    """SGD with momentum and decoupled-from-nothing weight decay (classic L2-in-grad).

    v <- momentum * v + (grad + weight_decay * param)
    param <- param - lr * v
    """

    def __init__(self, params: dict, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.momentum * self.velocities[name] + g
            self.velocities[name] = v
            p.data = p.data - lr * v
            if not np.all(np.isfinite(p.data)):
                raise NumericalError(f"parameter '{name}' became non-finite after SGD step")

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def get_state(self):
        return {k: v.copy() for k, v in self.velocities.items()}

    def set_state(self, state):
        for k in self.velocities:
            self.velocities[k] = state[k].copy()


# ---------------------------------------------------------------------------
# backward machinery

def _topo(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede users; root last


def _backprop(root: Tensor, targets=None):
    """Return {id(node): grad ndarray} for the subgraph feeding ``targets``.

    ``targets=None`` propagates everywhere (used by ``backward``).
    """
    if root.data.size != 1:
        raise ValueError("backward/grad require a scalar root")
    order = _topo(root)
    if targets is not None:
        depends = {}
        for node in order:  # parents first
            depends[id(node)] = id(node) in targets or any(
                depends.get(id(p), False) for p in node._parents)
        if not depends.get(id(root), False):
            return {}
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        if targets is not None and not depends[id(node)]:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if targets is not None and not depends.get(id(p), False):
                continue
            pg = np.broadcast_to(pg, p.data.shape) if pg.shape != p.data.shape else pg
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return grads


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    grads = _backprop(root, targets=None)
    for node in _topo(root):
        if node.requires_grad and not node._parents and id(node) in grads:
            node.grad = grads[id(node)] if node.grad is None else node.grad + grads[id(node)]


def grad(root: Tensor, wrt) -> list:
    """d(root)/d(t) for each tensor in ``wrt`` without touching ``.grad``.

    The walk is pruned to the subgraph between ``wrt`` and the root, so
    inner-loop gradients do not pay for (or leak into) the rest of the tape.
    """
    wrt = list(wrt)
    grads = _backprop(root, targets={id(t) for t in wrt})
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]
