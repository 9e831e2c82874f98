"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every operation returns a new :class:`Tensor` holding a reference to its
inputs and a closure that maps the output gradient to input gradients.
Calling :func:`backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every tensor that requires it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar hyperparameter is outside its valid range."""


class ContractError(RuntimeError):
    """A precondition on graph state (scalar loss, present grads) is violated."""


class Tensor:
    """Dense float64 array that can take part in a compute graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


# --------------------------------------------------------------------------
# graph


@dataclass
class ComputeGraph:
    """Nodes reachable from an output, in a valid topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        # iterative post-order DFS; deep MLP graphs would blow the recursion limit
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
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def __contains__(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> ComputeGraph:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad.

    Returns the graph that was traversed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputeGraph.from_output(loss)
    elif loss not in graph:
        raise ContractError("loss tensor is not part of the supplied graph")
    if not loss.requires_grad:
        return graph

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: user-visible accumulation
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis)

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), _bw, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis), 1.0 / n)


# --------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``a[i, index[i]]`` for a 2-D tensor, giving shape [B]."""
    if a.ndim != 2:
        raise DimensionError(f"pick: expected 2-D input, got shape {a.shape}")
    rows = np.arange(a.shape[0])
    idx = np.asarray(index, dtype=np.int64)

    def _bw(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return (out,)

    return _make(a.data[rows, idx], (a,), _bw, "pick")


# --------------------------------------------------------------------------
# layers


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W + b for x [B, D_in], W [D_in, D_out], b [D_out]."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: x {x.shape}, W {W.shape}, b {b.shape} are incompatible")
    out = x.data @ W.data + b.data

    def _bw(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(out, (x, W, b), _bw, "affine")


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0.0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return tau


def softmax_tau_array(z: np.ndarray, tau: float, axis: int = -1) -> np.ndarray:
    """Temperature softmax on a raw array (no graph)."""
    tau = _check_tau(tau)
    s = np.asarray(z, dtype=np.float64) / tau
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_tau(z: Tensor, tau: float, axis: int = -1) -> Tensor:
    tau = _check_tau(tau)
    p = softmax_tau_array(z.data, tau, axis)

    def _bw(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner) / tau,)

    return _make(p, (z,), _bw, "softmax")


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    """Log-sum-exp form of log softmax at unit temperature."""
    m = z.data.max(axis=axis, keepdims=True)
    shifted = z.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def _bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (z,), _bw, "log_softmax")


# --------------------------------------------------------------------------
# optimisation and verification


class SGD:
    """Plain SGD with heavy-ball momentum: v <- m v + g; p <- p - lr v."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ParameterError(f"lr must be nonnegative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} with shape {p.shape} has no gradient")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, state: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Functional form of :class:`SGD`; pass the returned velocity back in as ``state``."""
    opt = SGD(params, lr, momentum)
    if state is not None:
        opt.velocity = state
    opt.step()
    return opt.velocity


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
