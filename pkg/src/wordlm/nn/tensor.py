"""Reverse-mode autodiff over numpy arrays.

A Tensor records the ops that produced it; backward() replays the tape
in reverse topological order and accumulates gradients into every
tensor with requires_grad. Training runs in float32, gradient checks in
float64; ops keep whichever dtype they are given. Every op output is
checked finite (NaN/Inf raises immediately rather than poisoning the
run). Graph recording is per-thread so generation threads can disable
it independently.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ConfigError, NonFiniteError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by op {op!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_array(value, like: np.ndarray) -> np.ndarray:
    if isinstance(value, Tensor):
        raise ConfigError("pass Tensor operands directly, not through np coercion")
    return np.asarray(value, dtype=like.dtype)


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "op")

    def __init__(self, data, requires_grad: bool = False, _prev=(), op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != np.float64 and arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        _ensure_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and grad_enabled()
        self._backward = None
        self._prev = tuple(_prev) if self.requires_grad else ()
        self.op = op

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor (scalar unless grad is given).

        The graph is released as it is consumed: each node's closure and
        parent links are dropped once its gradient has been propagated, so
        the step's intermediates are freed by refcount instead of waiting
        on the cycle collector. Leaf gradients survive; running backward a
        second time through the same graph raises.
        """
        if self.requires_grad and self.op != "leaf" and self._backward is None:
            raise ConfigError("backward() through an already-released graph")
        if grad is None:
            if self.data.size != 1:
                raise ConfigError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(_topo_order(self)):
            if node._backward is not None:
                node._backward()
                node._backward = None
                node._prev = ()

    # -- graph construction ----------------------------------------------

    @staticmethod
    def _result(data, parents, op: str) -> "Tensor":
        rg = grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=rg, _prev=parents if rg else (), op=op)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other, self.data))
        out = Tensor._result(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def backward():
                g = out.grad
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other, self.data))
        out = Tensor._result(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def backward():
                g = out.grad
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other, self.data))
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(_as_array(other, self.data)) + (-self)

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other, self.data))
        out = Tensor._result(self.data / other.data, (self, other), "div")
        if out.requires_grad:
            def backward():
                g = out.grad
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    d = -g * self.data / (other.data * other.data)
                    other._accumulate(_unbroadcast(d, other.data.shape))
            out._backward = backward
        return out

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ConfigError("pow exponent must be a plain number")
        out = Tensor._result(self.data ** exponent, (self,), "pow")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1))
            out._backward = backward
        return out

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(_as_array(other, self.data))
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ConfigError("matmul operands must have at least 2 dimensions")
        out = Tensor._result(self.data @ other.data, (self, other), "matmul")
        if out.requires_grad:
            def backward():
                g = out.grad
                if self.requires_grad:
                    da = g @ other.data.swapaxes(-1, -2)
                    self._accumulate(_unbroadcast(da, self.data.shape))
                if other.requires_grad:
                    db = self.data.swapaxes(-1, -2) @ g
                    other._accumulate(_unbroadcast(db, other.data.shape))
            out._backward = backward
        return out

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        with np.errstate(over="ignore"):
            out = Tensor._result(np.exp(self.data), (self,), "exp")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad * out.data)
            out._backward = backward
        return out

    def log(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = Tensor._result(np.log(self.data), (self,), "log")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad / self.data)
            out._backward = backward
        return out

    def tanh(self):
        out = Tensor._result(np.tanh(self.data), (self,), "tanh")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad * (1.0 - out.data * out.data))
            out._backward = backward
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            def backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._result(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad.reshape(self.data.shape))
            out._backward = backward
        return out

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor._result(self.data.transpose(axes), (self,), "transpose")
        if out.requires_grad:
            inverse = np.argsort(axes)
            def backward():
                self._accumulate(out.grad.transpose(inverse))
            out._backward = backward
        return out

    def swapaxes(self, a: int, b: int):
        out = Tensor._result(self.data.swapaxes(a, b), (self,), "swapaxes")
        if out.requires_grad:
            def backward():
                self._accumulate(out.grad.swapaxes(a, b))
            out._backward = backward
        return out

    def __getitem__(self, idx):
        out = Tensor._result(self.data[idx], (self,), "getitem")
        if out.requires_grad:
            def backward():
                buf = np.zeros_like(self.data)
                np.add.at(buf, idx, out.grad)
                self._accumulate(buf)
            out._backward = backward
        return out

    def broadcast_to(self, shape):
        out = Tensor._result(
            np.broadcast_to(self.data, tuple(shape)).copy(), (self,), "broadcast"
        )
        if out.requires_grad:
            def backward():
                self._accumulate(_unbroadcast(out.grad, self.data.shape))
            out._backward = backward
        return out


def cat(tensors: list[Tensor], axis: int) -> Tensor:
    """Concatenate along an existing axis, routing gradients per slice."""
    if not tensors:
        raise ConfigError("cat requires at least one tensor")
    out = Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "cat"
    )
    if out.requires_grad:
        sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
        def backward():
            for t, g in zip(tensors, np.split(out.grad, sizes, axis=axis)):
                if t.requires_grad:
                    t._accumulate(g)
        out._backward = backward
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            stack.append((parent, False))
    return order


def normal_init(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    """Weight tensor ~ Normal(0, std), requires_grad on."""
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
