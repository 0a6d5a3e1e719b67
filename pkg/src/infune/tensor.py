"""Small reverse-mode autodiff over dense float64 arrays.

Only the handful of primitives the alignment model needs are provided:
row gathers, affine maps, tanh, concatenation, row means, truncated cosine
and squared error.  Every op returns a :class:`Tensor` that remembers its
parents and a closure that pushes the output gradient back to them.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError, NonFiniteError

DTYPE = np.float64


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from this scalar; parameter grads accumulate in ``.grad``."""
        if self.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _needs_grad(*tensors):
    return any(t.requires_grad or t._backward is not None for t in tensors)


def _make(value, parents, backward):
    if not _needs_grad(*parents):
        return Tensor(value)
    return Tensor(value, _parents=parents, _backward=backward)


def constant(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def backward(loss, params):
    """Run backprop from ``loss`` and return ``{name: grad}`` for ``params``.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for name, p in params.items()
    }


# ---------------------------------------------------------------- primitives


def gather(table, index):
    """Rows ``table[index]``; the backward scatter-adds into the table."""
    index = np.asarray(index, dtype=np.int64)
    out = table.value[index]

    def _backward(g):
        n, d = table.shape
        flat = (index.reshape(-1, 1) * d + np.arange(d)).ravel()
        full = np.bincount(flat, weights=g.reshape(-1), minlength=n * d).reshape(n, d)
        table._accumulate(full)

    return _make(out, (table,), _backward)


def linear(x, weight, bias):
    """Row-wise affine map ``x @ weight.T + bias``; ``weight`` is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ContractError(f"input dim {x.shape[-1]} does not match weight columns {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ContractError(f"bias shape {bias.shape} does not match weight rows {weight.shape[0]}")
    out = x.value @ weight.value.T + bias.value

    def _backward(g):
        if _needs_grad(x):
            x._accumulate(g @ weight.value)
        if _needs_grad(weight):
            weight._accumulate(np.outer(g, x.value) if g.ndim == 1 else g.T @ x.value)
        if _needs_grad(bias):
            bias._accumulate(g.sum(axis=0) if g.ndim == 2 else g)

    return _make(out, (x, weight, bias), _backward)


def add(a, b):
    if a.shape != b.shape:
        raise ContractError(f"add shape mismatch {a.shape} vs {b.shape}")

    def _backward(g):
        if _needs_grad(a):
            a._accumulate(g)
        if _needs_grad(b):
            b._accumulate(g)

    return _make(a.value + b.value, (a, b), _backward)


def scale(a, c):
    c = float(c)
    return _make(a.value * c, (a,), lambda g: a._accumulate(g * c))


def tanh(a):
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


def concat(tensors, axis=-1):
    tensors = [constant(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if _needs_grad(t):
                t._accumulate(piece)

    return _make(out, tuple(tensors), _backward)


def mean_rows(a):
    """Mean over the leading axis; an empty input yields a zero vector."""
    n = a.shape[0]
    if n == 0:
        return _make(np.zeros(a.shape[1:], dtype=DTYPE), (a,), lambda g: None)
    out = a.value.mean(axis=0)
    return _make(out, (a,), lambda g: a._accumulate(np.broadcast_to(g / n, a.shape)))


def dot(a, b):
    """Row-wise inner product over the last axis."""
    if a.shape != b.shape:
        raise ContractError(f"dot shape mismatch {a.shape} vs {b.shape}")
    out = np.sum(a.value * b.value, axis=-1)

    def _backward(g):
        g = np.expand_dims(g, -1)
        if _needs_grad(a):
            a._accumulate(g * b.value)
        if _needs_grad(b):
            b._accumulate(g * a.value)

    return _make(out, (a, b), _backward)


def norm(a):
    """Euclidean norm over the last axis; the gradient at zero is taken as zero."""
    out = np.sqrt(np.sum(a.value * a.value, axis=-1))

    def _backward(g):
        safe = np.where(out > 0, out, 1.0)
        a._accumulate(np.expand_dims(np.where(out > 0, g / safe, 0.0), -1) * a.value)

    return _make(out, (a,), _backward)


def relu(a):
    """Clamp at zero; the subgradient at exactly zero is zero."""
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: a._accumulate(g * mask))


def sum_all(a):
    return _make(np.sum(a.value), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def squared_error(r, target):
    """Sum of ``(r - target)**2`` as a scalar; ``target`` is a constant."""
    target = np.asarray(target, dtype=DTYPE)
    if r.shape != target.shape:
        raise ContractError(f"target shape {target.shape} does not match {r.shape}")
    diff = r.value - target
    return _make(np.sum(diff * diff), (r,), lambda g: r._accumulate(2.0 * g * diff))


def cos_plus(a, b):
    """Truncated cosine ``max(0, cos<a, b>)`` over the last axis.

    Zero-norm rows score 0 with zero gradient, and so does the truncation
    zone including the boundary cos == 0.
    """
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ContractError(f"cos_plus shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(np.sum(a.value * a.value, axis=-1))
    nb = np.sqrt(np.sum(b.value * b.value, axis=-1))
    valid = (na > 0) & (nb > 0)
    denom = np.where(valid, na * nb, 1.0)
    raw = np.where(valid, np.sum(a.value * b.value, axis=-1) / denom, 0.0)
    active = valid & (raw > 0)
    out = np.where(active, raw, 0.0)

    def _backward(g):
        g = np.expand_dims(np.where(active, g, 0.0), -1)
        c = np.expand_dims(raw, -1)
        inv = np.expand_dims(1.0 / denom, -1)
        if _needs_grad(a):
            sa = np.expand_dims(np.where(valid, na, 1.0), -1)
            a._accumulate(g * (b.value * inv - c * a.value / (sa * sa)))
        if _needs_grad(b):
            sb = np.expand_dims(np.where(valid, nb, 1.0), -1)
            b._accumulate(g * (a.value * inv - c * b.value / (sb * sb)))

    return _make(out, (a, b), _backward)


def mlp2_forward(x, W1, b1, W2, b2):
    """Two-layer perceptron ``W2 tanh(W1 x + b1) + b2`` applied row-wise."""
    x = constant(x)
    if W2.shape[1] != W1.shape[0]:
        raise ContractError(f"hidden dim {W1.shape[0]} does not match W2 columns {W2.shape[1]}")
    return linear(tanh(linear(x, W1, b1)), W2, b2)


# ---------------------------------------------------------------- parameters


class MLP2:
    """Named parameter bundle for a two-layer perceptron."""

    def __init__(self, name, n_in, n_hidden, n_out, rng):
        self.name = name
        self.W1 = _uniform(rng, (n_hidden, n_in), n_in, f"{name}.W1")
        self.b1 = Tensor(np.zeros(n_hidden), requires_grad=True, name=f"{name}.b1")
        self.W2 = _uniform(rng, (n_out, n_hidden), n_hidden, f"{name}.W2")
        self.b2 = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b2")

    @property
    def n_in(self):
        return self.W1.shape[1]

    def params(self):
        return {p.name: p for p in (self.W1, self.b1, self.W2, self.b2)}

    def __call__(self, x):
        x = constant(x)
        if x.shape[-1] != self.n_in:
            raise ContractError(f"{self.name}: input dim {x.shape[-1]} != {self.n_in}")
        return mlp2_forward(x, self.W1, self.b1, self.W2, self.b2)


def _uniform(rng, shape, fan_in, name):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def embedding(rng, n, dim, name, std=0.1):
    return Tensor(rng.normal(0.0, std, size=(n, dim)), requires_grad=True, name=name)


class Adam:
    """Adam over a dict of named parameters; moments live alongside them."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.step_count = 0

    def step(self, grads=None):
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        grads = {k: (np.zeros_like(p.value) if grads.get(k) is None else grads[k])
                 for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {k!r}")
        self.step_count += 1
        t = self.step_count
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1 ** t)
            v_hat = self.v[k] / (1 - self.beta2 ** t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, step=0, seed=None, meta=None):
    """Write named tensors to an ``.npz`` container (little-endian float64).

    ``step``, ``seed`` and any JSON-able ``meta`` ride along under
    reserved keys so a run can be resumed or audited.
    """
    arrays = {name: np.asarray(p.value if isinstance(p, Tensor) else p, dtype="<f8")
              for name, p in params.items()}
    header = {"step": int(step), "seed": seed, "meta": meta or {},
              "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Return ``(arrays, header)`` from a file written by :func:`save_checkpoint`."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        arrays = {k: data[k].astype(DTYPE) for k in data.files if k != "__header__"}
    return arrays, header
