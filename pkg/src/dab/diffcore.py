"""Minimal reverse-mode differentiation over dense float64 arrays.

Tensors are recorded define-by-run: every op returns a new :class:`Tensor`
that remembers its parents and a closure that pushes the upstream gradient
back to them.  :func:`grad` walks the recorded nodes in reverse topological
order.  Broadcasting follows numpy, and gradients are summed back to the
operand's shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "SGD",
    "Adam",
    "as_tensor",
    "parameter",
    "constant",
    "stop_gradient",
    "matmul",
    "elu",
    "relu",
    "softplus",
    "exp",
    "log",
    "square",
    "sqrt",
    "clip_min",
    "logsumexp",
    "concat",
    "grad",
    "finite_difference_check",
    "truncated_normal",
    "make_optimizer",
]


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "op", "name", "_parents", "_backward", "requires_grad")

    def __init__(self, data, op="leaf", parents=(), backward=None,
                 name=None, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            where = name or op
            raise FloatingPointError(f"non-finite value produced by node '{where}'")
        self.data = arr
        self.op = op
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        return _binary(self, other, np.add, "add",
                       lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return _binary(self, other, np.subtract, "sub",
                       lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        return _binary(self, other, np.multiply, "mul",
                       lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return _binary(self, other, np.divide, "div",
                       lambda g, a, b: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _unary(self, np.negative, "neg", lambda g, x, y: -g)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, index):
        src_shape = self.data.shape

        def backward(g):
            out = np.zeros(src_shape)
            np.add.at(out, index, g)
            return (out,)

        return Tensor(self.data[index], "getitem", (self,), backward)

    # reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        src_shape = self.data.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), "sum", (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        src_shape = self.data.shape
        return Tensor(self.data.reshape(*shape), "reshape", (self,),
                      lambda g: (g.reshape(src_shape),))

    @property
    def T(self):
        return Tensor(self.data.T, "transpose", (self,), lambda g: (g.T,))


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, "const")


def parameter(value, name=None) -> Tensor:
    return Tensor(value, "param", name=name, requires_grad=True)


def constant(value, name=None) -> Tensor:
    return Tensor(value, "const", name=name)


def stop_gradient(x) -> Tensor:
    """Forward value unchanged; nothing flows back through the result."""
    x = as_tensor(x)
    return Tensor(x.data, "stop_gradient")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, fn, op, grad_fn):
    with np.errstate(all="ignore"):
        out = fn(a.data, b.data)

    def backward(g):
        ga, gb = grad_fn(g, a.data, b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, op, (a, b), backward)


def _unary(x, fn, op, grad_fn):
    with np.errstate(all="ignore"):
        out = fn(x.data)

    def backward(g):
        return (grad_fn(g, x.data, out),)

    return Tensor(out, op, (x,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, "matmul", (a, b),
                  lambda g: (g @ b.data.T, a.data.T @ g))


def elu(x) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise."""
    x = as_tensor(x)
    return _unary(x, lambda v: np.where(v > 0, v, np.expm1(np.minimum(v, 0.0))), "elu",
                  lambda g, v, y: g * np.where(v > 0, 1.0, y + 1.0))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, lambda v: np.maximum(v, 0.0), "relu",
                  lambda g, v, y: g * (v > 0))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, lambda v: np.logaddexp(0.0, v), "softplus",
                  lambda g, v, y: g * np.exp(-np.logaddexp(0.0, -v)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.exp, "exp", lambda g, v, y: g * y)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log, "log", lambda g, v, y: g / v)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.square, "square", lambda g, v, y: 2.0 * g * v)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.sqrt, "sqrt", lambda g, v, y: 0.5 * g / y)


def clip_min(x, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero wherever the floor is active."""
    x = as_tensor(x)
    return _unary(x, lambda v: np.maximum(v, floor), "clip_min",
                  lambda g, v, y: g * (v > floor))


def logsumexp(x, axis=-1, keepdims=False) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    with np.errstate(all="ignore"):
        shifted = np.exp(x.data - m)
        lse = np.log(shifted.sum(axis=axis, keepdims=True)) + m
    soft = np.exp(x.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor(out, "logsumexp", (x,), backward)


def concat(tensors: Iterable[Tensor], axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                  tensors, backward)


# reverse pass -------------------------------------------------------------


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output``, every node after all of its inputs."""
    order, seen = [], set()
    stack = [(output, False)]
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
    return order


def grad(output: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``output`` w.r.t. each named leaf.

    Leaves not on any path to ``output`` get an exact zero array.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {id(output): np.ones_like(output.data)}
    for node in reversed(topological_order(output)):
        g = grads.get(id(node))
        if g is None or node._backward is None or not node.requires_grad:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.array(pg, dtype=np.float64)
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.reshape(g, p.shape).copy()
    return out


class Graph:
    """Named parameters plus a builder function ``build(params, inputs) -> outputs``.

    ``forward`` runs the builder and keeps the resulting nodes so that
    ``backward`` can differentiate any scalar output w.r.t. the parameters.
    """

    def __init__(self, build: Callable, params: Mapping[str, np.ndarray] | None = None):
        self.build = build
        self.params = {k: parameter(v, name=k) for k, v in (params or {}).items()}
        self.nodes: list[Tensor] = []
        self._outputs: dict[str, Tensor] = {}

    def forward(self, inputs: Mapping[str, object] | None = None) -> dict[str, np.ndarray]:
        bound = {k: constant(v, name=k) for k, v in (inputs or {}).items()}
        outputs = self.build(self.params, bound)
        if isinstance(outputs, Tensor):
            outputs = {"out": outputs}
        self._outputs = dict(outputs)
        order, seen = [], set()
        for t in self._outputs.values():
            for node in topological_order(t):
                if id(node) not in seen:
                    seen.add(id(node))
                    order.append(node)
        self.nodes = order
        return {k: v.data.copy() for k, v in self._outputs.items()}

    def backward(self, output: str = "out") -> dict[str, np.ndarray]:
        if output not in self._outputs:
            raise KeyError(f"no forward output named '{output}'; run forward first")
        return grad(self._outputs[output], self.params)


# optimizers ---------------------------------------------------------------


def _check_shapes(params, grads):
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter "
                             f"'{name}' shape {p.shape}")


class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.t = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]):
        _check_shapes(params, grads)
        self.t += 1
        for name, p in params.items():
            p.data = p.data - self.lr * grads[name]
        return params


class Adam:
    kind = "adam"

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]):
        _check_shapes(params, grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def make_optimizer(kind: str, lr: float):
    kinds = {"sgd": SGD, "adam": Adam}
    try:
        return kinds[kind.lower()](lr)
    except KeyError:
        raise ValueError(f"unknown optimizer '{kind}', expected one of {sorted(kinds)}") from None


# checks and init ------------------------------------------------------------


def finite_difference_check(loss_fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray],
                            step: float = 1e-6) -> float:
    """Max over all entries of |analytic - central difference| / max(1, |analytic|).

    ``loss_fn`` receives a dict of parameter tensors and must return a scalar
    tensor.  It is evaluated twice at the base point to reject
    non-deterministic losses.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(values):
        return float(loss_fn({k: constant(v) for k, v in values.items()}).data)

    tensors = {k: parameter(v.copy(), name=k) for k, v in base.items()}
    out = loss_fn(tensors)
    if float(out.data) != value(base):
        raise RuntimeError("loss is not deterministic; seed any sampling inside loss_fn")
    analytic = grad(out, tensors)

    worst = 0.0
    for name, arr in base.items():
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            fd = (value(plus) - value(minus)) / (2 * step)
            a = analytic[name][idx]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


def truncated_normal(rng: np.random.Generator, shape, stddev=0.1, bound=2.0) -> np.ndarray:
    """Normal(0, stddev^2) redrawn until every entry lies within +-bound*stddev."""
    out = rng.normal(0.0, stddev, size=shape)
    bad = np.abs(out) > bound * stddev
    while bad.any():
        out[bad] = rng.normal(0.0, stddev, size=int(bad.sum()))
        bad = np.abs(out) > bound * stddev
    return out
