"""Dense 2-D tensors with reverse-mode gradients over a fixed operation set.

Every tensor is a ``(rows, cols)`` matrix. Operations on tensors that require
gradients are recorded as nodes carrying a global sequence number; ``backward``
collects the nodes reachable from a scalar loss into a :class:`Tape` and
replays it in reverse execution order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "StaleTapeError",
    "GradientError",
    "Tensor",
    "Tape",
    "SgdConfig",
    "no_grad",
    "is_grad_enabled",
    "record",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "scale_cols",
    "softmax_rows",
    "tanh",
    "embedding",
    "sum_all",
    "sum_squares",
    "cross_entropy",
    "backward",
    "sgd_step",
    "global_grad_norm",
    "zeros",
    "eye",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class StaleTapeError(RuntimeError):
    """Raised when backward is replayed over an already consumed graph."""


class GradientError(RuntimeError):
    """Raised when an optimizer step finds a parameter without a gradient."""


_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("seq", "op", "inputs", "output", "backward_fn", "consumed")

    def __init__(self, op, inputs, output, backward_fn):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.consumed = False


def _as_2d(data, dtype) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got array with shape {arr.shape}")
    return arr


class Tensor:
    """A dense row-major matrix with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.float64
        self.data = _as_2d(data, dtype or np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # no copy, for results of ops
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self)


def zeros(rows: int, cols: int, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros((rows, cols), dtype=dtype), requires_grad=requires_grad)


def eye(n: int, dtype=np.float64) -> Tensor:
    return Tensor(np.eye(n, dtype=dtype))


def record(
    op: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out`` as a tensor and, when needed, put it on the tape.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per input, in order.
    """
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        result._node = _Node(op, tuple(inputs), result, backward_fn)
    return result


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return record("matmul", A @ B, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def transpose(a: Tensor) -> Tensor:
    return record("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def scale_cols(a: Tensor, v: Tensor) -> Tensor:
    """Multiply column ``j`` of ``a`` by ``v[0, j]``; equals ``a @ diag(v)``."""
    if v.rows != 1 or v.cols != a.cols:
        raise DimensionError(f"scale_cols: need a 1x{a.cols} vector, got {v.shape}")
    A, V = a.data, v.data

    def bw(g):
        return (g * V, (g * A).sum(axis=0, keepdims=True))

    return record("scale_cols", A * V, (a, v), bw)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max.

    ``mask`` is an optional boolean array of the same shape; ``False`` entries
    get probability zero. Every row must keep at least one entry.
    """
    x = a.data
    if mask is not None:
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask {mask.shape} vs input {x.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax_rows: a row is fully masked")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record("softmax_rows", y, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record("tanh", y, (a,), lambda g: (g * (1 - y * y),))


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; the result has one row per id."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise IndexError(f"embedding: id out of range for table with {table.rows} rows")
    out = table.data[idx]

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return record("embedding", out, (table,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(keepdims=True).reshape(1, 1)
    return record("sum_all", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_squares(a: Tensor) -> Tensor:
    """Squared Frobenius norm as a 1x1 tensor."""
    A = a.data
    out = np.sum(A * A, keepdims=True).reshape(1, 1)
    return record("sum_squares", out, (a,), lambda g: (2 * g * A,))


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean token-level negative log-likelihood, one logits row per target."""
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    m, v = logits.shape
    if idx.size != m:
        raise DimensionError(f"cross_entropy: {m} logits rows for {idx.size} targets")
    if m == 0:
        raise DimensionError("cross_entropy: no positions")
    if idx.min() < 0 or idx.max() >= v:
        bad = int(idx[(idx < 0) | (idx >= v)][0])
        raise IndexError(f"cross_entropy: target id {bad} outside vocabulary of size {v}")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(m)
    loss = -logp[rows, idx].mean()
    out = np.array([[loss]], dtype=x.dtype)

    def bw(g):
        grad = np.exp(logp)
        grad[rows, idx] -= 1
        return (grad * (g[0, 0] / m),)

    return record("cross_entropy", out, (logits,), bw)


class Tape:
    """The recorded operations reachable from one output, in execution order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        if out._node is None:
            raise StaleTapeError("output was not produced by a recorded operation")
        seen: set[int] = set()
        stack = [out._node]
        nodes = []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.consumed:
                raise StaleTapeError(
                    f"operation '{node.op}' was already differentiated; rerun the forward pass"
                )
            nodes.append(node)
            for t in node.inputs:
                if t._node is not None:
                    stack.append(t._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def replay_backward(self, seed: np.ndarray, visit: Callable | None = None) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1].output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if visit is not None:
                visit(node)
            node.consumed = True
            fn, inputs = node.backward_fn, node.inputs
            node.backward_fn, node.inputs, node.output = None, (), None
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is not None:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    gi = np.asarray(gi, dtype=t.data.dtype)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every leaf tensor reachable from a 1x1 ``loss``."""
    if loss.shape != (1, 1):
        raise DimensionError(f"backward needs a 1x1 loss, got {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            # the loss is itself a leaf
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return Tape([])
        raise StaleTapeError("loss has no recorded graph (already consumed or built without grad)")
    tape = Tape.from_output(loss)
    tape.replay_backward(np.ones_like(loss.data))
    return tape


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    steps: int = 1
    clip_norm: float | None = None

    def __post_init__(self):
        # zero is accepted so that a frozen run can be expressed
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0 and finite, got {self.learning_rate}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))


def sgd_step(params: Iterable[Tensor], cfg: SgdConfig | float) -> None:
    """``p <- p - lr * grad`` for every parameter, then clear the gradients.

    With ``cfg.clip_norm`` set, gradients are first rescaled so that their
    joint L2 norm does not exceed it.
    """
    if not isinstance(cfg, SgdConfig):
        cfg = SgdConfig(float(cfg))
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradientError(f"parameter {i} with shape {p.shape} has no gradient")
    factor = 1.0
    if cfg.clip_norm is not None:
        norm = global_grad_norm(params)
        if norm > cfg.clip_norm:
            factor = cfg.clip_norm / norm
    for p in params:
        step = p.data.dtype.type(cfg.learning_rate * factor)
        p.data = p.data - step * p.grad
        p.grad = None
