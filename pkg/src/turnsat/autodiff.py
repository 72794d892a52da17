"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run engine: every operation returns a new ``Tensor``
node holding its value, references to its inputs, and a closure that
routes the output gradient back to them. Graphs are rebuilt for every
forward pass and torn down by ``backward``. Everything is double
precision; inputs are never mutated.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class EmptyPoolError(ValueError):
    """Mean pooling was requested over an empty axis."""


class Tensor:
    """A value in the computation graph.

    Leaves (parameters, constants) have no parents. Interior nodes
    remember their parents and a backward closure. ``grad`` is populated
    by :func:`backward` and holds a float64 array of the same shape as
    ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # -- operator sugar; numbers are lifted to constant scalars --------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, -_lift(other))

    def __rsub__(self, other):
        return add(_lift(other), -self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    out._parents = parents if out.requires_grad else ()
    out._backward = None
    return out


def _accum(node: Tensor, g: np.ndarray) -> None:
    # contributions are freshly allocated arrays, so ownership transfer
    # on the first one is safe
    if node.grad is None:
        node.grad = g
    else:
        node.grad += g


# -- binary elementwise ops -----------------------------------------------


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return  # scalar-with-tensor broadcast is the only legal mismatch
    raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                _accum(a, g.sum() if a.data.ndim == 0 and g.ndim > 0 else g.copy())
            if b.requires_grad:
                _accum(b, g.sum() if b.data.ndim == 0 and g.ndim > 0 else g.copy())

        out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                ga = g * b.data
                _accum(a, ga.sum() if a.data.ndim == 0 and ga.ndim > 0 else ga)
            if b.requires_grad:
                gb = g * a.data
                _accum(b, gb.sum() if b.data.ndim == 0 and gb.ndim > 0 else gb)

        out._backward = bw
    return out


def neg(x: Tensor) -> Tensor:
    out = _node(-x.data, (x,))
    if out.requires_grad:

        def bw(g):
            _accum(x, -g)

        out._backward = bw
    return out


# -- unary activations ----------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    # exp overflow for very negative inputs saturates cleanly to 0.0
    with np.errstate(over="ignore"):
        val = 1.0 / (1.0 + np.exp(-x.data))
    out = _node(val, (x,))
    if out.requires_grad:

        def bw(g):
            _accum(x, g * (val * (1.0 - val)))

        out._backward = bw
    return out


def tanh(x: Tensor) -> Tensor:
    val = np.tanh(x.data)
    out = _node(val, (x,))
    if out.requires_grad:

        def bw(g):
            _accum(x, g * (1.0 - val * val))

        out._backward = bw
    return out


def relu(x: Tensor) -> Tensor:
    val = np.maximum(x.data, 0.0)
    out = _node(val, (x,))
    if out.requires_grad:

        def bw(g):
            _accum(x, g * (x.data > 0.0))

        out._backward = bw
    return out


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product [m x k] . [k x n] -> [m x n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: cannot multiply {a.data.shape} by {b.data.shape}"
        )
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)

        out._backward = bw
    return out


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """[h x d] . [d] -> [h]; the vector special case of matmul."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(
            f"matvec: cannot multiply {m.data.shape} by {v.data.shape}"
        )
    out = _node(m.data @ v.data, (m, v))
    if out.requires_grad:

        def bw(g):
            if m.requires_grad:
                _accum(m, np.outer(g, v.data))
            if v.requires_grad:
                _accum(v, m.data.T @ g)

        out._backward = bw
    return out


# -- shape ops ------------------------------------------------------------


def mean(x: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean along ``axis``; the pooled axis must be nonempty."""
    n = x.data.shape[axis]
    if n == 0:
        raise EmptyPoolError(f"mean over empty axis {axis} of shape {x.data.shape}")
    out = _node(x.data.mean(axis=axis), (x,))
    if out.requires_grad:

        def bw(g):
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape) * (1.0 / n))

        out._backward = bw
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _node(x.data.reshape(shape), (x,))
    if out.requires_grad:

        def bw(g):
            _accum(x, g.reshape(x.data.shape))

        out._backward = bw
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = (slice(None),) * axis + (slice(lo, hi),)
                    _accum(p, g[idx].copy())

        out._backward = bw
    return out


def stack(parts: list[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    out = _node(np.stack([p.data for p in parts]), tuple(parts))
    if out.requires_grad:

        def bw(g):
            for i, p in enumerate(parts):
                if p.requires_grad:
                    _accum(p, g[i].copy())

        out._backward = bw
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a [V x d] table by integer id; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.intp)
    out = _node(table.data[ids], (table,))
    if out.requires_grad:

        def bw(g):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

        out._backward = bw
    return out


# -- losses ---------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits, in the stable log-sum-exp form.

    ``targets`` is a plain {0,1} float array; it is data, not a graph node.
    """
    targets = np.asarray(targets, dtype=np.float64)
    x = logits.data
    if x.shape != targets.shape:
        raise ShapeError(
            f"bce_with_logits: logits {x.shape} vs targets {targets.shape}"
        )
    n = x.size
    # max(x,0) - x*y + log(1 + exp(-|x|)) is exact and never overflows
    per = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out = _node(np.asarray(per.sum() / n), (logits,))
    if out.requires_grad:

        def bw(g):
            with np.errstate(over="ignore"):
                sig = 1.0 / (1.0 + np.exp(-x))
            _accum(logits, (sig - targets) * (float(g) / n))

        out._backward = bw
    return out


# -- backward pass and gradient checking ----------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar loss.

    Populates ``grad`` on every reachable node and returns the gradients
    of named leaf parameters as ``{name: array}``. Grads within the
    graph are reset first, so repeated calls on fresh graphs never see
    stale values.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads: dict[str, np.ndarray] = {}
    for node in order:
        if node.requires_grad and not node._parents and node.name is not None:
            if node.grad is not None:
                grads[node.name] = node.grad
    return grads


def grad_check(
    f: Callable[..., Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f(params)`` with central differences.

    ``f`` must be deterministic for fixed parameter values and return a
    scalar Tensor. Returns the max over all parameter elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ContractError("grad_check requires eps > 0")
    params = list(params)
    analytic = backward(f(params))
    worst = 0.0
    for t in params:
        a = analytic.get(t.name)
        a_flat = None if a is None else a.ravel()
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).data)
            flat[i] = orig - eps
            fm = float(f(params).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            av = 0.0 if a_flat is None else float(a_flat[i])
            rel = abs(av - numeric) / max(abs(av), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
