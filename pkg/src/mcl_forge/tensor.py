"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only rank-1 and rank-2 tensors are supported. Broadcasting is limited to
exact shape matches, python scalars, and the row-vector bias add used by
affine layers.
"""

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``data`` is never mutated in place by public operations; optimizers
    rebind it. ``grad`` has the same shape as ``data`` once populated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"only rank 0-2 tensors are supported, got rank {arr.ndim}")
        if arr.size == 0:
            raise ShapeError("tensors must be nonempty")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


Operand = Union[Tensor, float, int]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _check_same(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def _bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def add(a: Operand, b: Operand) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data + s, (a,), lambda g: _accumulate(a, g), "add")
    _check_same(a, b, "add")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), _bw, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(scale(b, -1.0), float(a))
    _check_same(a, b, "sub")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), _bw, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")

    def _bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), _bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: _accumulate(a, g * s), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: _accumulate(a, g * mask), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _bw(g):
        _accumulate(a, g * out)

    return _make(out, (a,), _bw, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data), "log")


def max_subtract(a: Tensor) -> Tensor:
    """Subtract the maximum of each row (the whole vector for rank 1).

    The gradient is exact away from ties: the max term routes the summed
    upstream gradient to the first maximizing entry.
    """
    x = a.data
    axis = x.ndim - 1 if x.ndim else None
    if x.ndim == 0:
        return _make(np.zeros_like(x), (a,), lambda g: _accumulate(a, np.zeros_like(x)), "max_subtract")
    idx = np.argmax(x, axis=axis)
    out = x - np.max(x, axis=axis, keepdims=True)

    def _bw(g):
        gx = g.copy()
        total = g.sum(axis=axis)
        if x.ndim == 1:
            gx[idx] -= total
        else:
            gx[np.arange(x.shape[0]), idx] -= total
        _accumulate(a, gx)

    return _make(out, (a,), _bw, "max_subtract")


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector to every row of a batch x C matrix."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {a.shape}")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=0))

    return _make(a.data + b.data, (a, b), _bw, "add_bias")


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = a.data.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: _accumulate(a, np.full(shape, float(g))), "sum")


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def log_softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise ``log softmax(a / temperature)`` computed with max subtraction."""
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = a.data / temperature
    axis = z.ndim - 1
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def _bw(g):
        _accumulate(a, (g - probs * g.sum(axis=axis, keepdims=True)) / temperature)

    return _make(out, (a,), _bw, "log_softmax")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise ``max(a, lo)``; clamped entries pass no gradient."""
    mask = a.data >= lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: _accumulate(a, g * mask), "clamp_min")


# ------------------------------------------------------------------ backward


@dataclass
class ComputationRecord:
    """Topologically ordered nodes reachable from a loss (inputs first)."""

    nodes: List[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


def build_record(loss: Tensor) -> ComputationRecord:
    order: List[Tensor] = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return ComputationRecord(order)


def backward(loss: Tensor, record: Optional[ComputationRecord] = None) -> ComputationRecord:
    """Populate ``grad`` on every tensor that requires it and feeds ``loss``.

    Gradients accumulate into leaves; interior nodes are reset first, so
    repeating a backward pass after zeroing the leaves is reproducible.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    if record is None:
        record = build_record(loss)
    if not record.nodes:
        raise ContractError("empty computation record")
    for node in record.nodes:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return record


def grad_check(f: Callable[[], Tensor], params: Union[Tensor, Sequence[Tensor]], eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` is called with no arguments and must read ``params`` each call.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        base = p.data
        flat = base.reshape(-1)
        for j in range(flat.size):
            plus = flat.copy()
            plus[j] += eps
            minus = flat.copy()
            minus[j] -= eps
            with no_grad():
                p.data = plus.reshape(base.shape)
                f_plus = f().item()
                p.data = minus.reshape(base.shape)
                f_minus = f().item()
            p.data = base
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic.reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
