"""Low-rank adapters for frozen linear maps.

Both adapters compute an additive update to ``x @ W`` without ever forming the
``n x k`` update matrix:

* :class:`LoraAdapter` -- ``x @ A @ B`` with ``A`` zero-initialized.
* :class:`AdaLoraAdapter` -- ``x @ P @ diag(lam * mask) @ Q`` with a singular
  value budget that shrinks over training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    eye,
    matmul,
    mul,
    scale,
    scale_cols,
    sub,
    sum_squares,
    transpose,
)

INIT_STD = 0.02
DEFAULT_GAMMA = 0.1


class ScheduleError(ValueError):
    """Raised for an out-of-range step or an unsatisfiable budget."""


class AdapterConfigError(ValueError):
    """Raised for an invalid adapter rank or shape."""


def _check_rank(n: int, k: int, r: int) -> None:
    if r < 1 or r > min(n, k):
        raise AdapterConfigError(f"rank {r} must lie in [1, {min(n, k)}] for a {n}x{k} weight")


class LoraAdapter:
    """Trainable ``A`` (n x r, zeros) and ``B`` (r x k, N(0, 0.02^2)).

    The zero factor is ``A``, so ``A @ B`` is exactly zero at construction.
    """

    kind = "lora"

    def __init__(self, n: int, k: int, r: int, rng: np.random.Generator | None = None, dtype=np.float64):
        _check_rank(n, k, r)
        rng = np.random.default_rng(0) if rng is None else rng
        self.n, self.k, self.r = n, k, r
        self.A = Tensor(np.zeros((n, r), dtype=dtype), requires_grad=True)
        self.B = Tensor(rng.normal(0.0, INIT_STD, size=(r, k)).astype(dtype), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def num_trainable(self) -> int:
        return self.r * (self.n + self.k)

    def delta(self, x: Tensor) -> Tensor:
        if x.cols != self.n:
            raise DimensionError(f"adapter expects inputs with {self.n} columns, got {x.shape}")
        return matmul(matmul(x, self.A), self.B)

    def delta_weight(self) -> np.ndarray:
        return self.A.data @ self.B.data

    def state(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


def lora_forward(x: Tensor, W: Tensor, adapter: LoraAdapter) -> Tensor:
    """``x @ W + (x @ A) @ B``. ``W`` is never given a gradient."""
    if W.requires_grad:
        raise AdapterConfigError("base weight passed to lora_forward must be frozen")
    if W.shape != (adapter.n, adapter.k):
        raise DimensionError(f"weight {W.shape} does not match adapter {(adapter.n, adapter.k)}")
    return add(matmul(x, W), adapter.delta(x))


def parameter_ratio(n: int, k: int, r: int) -> float:
    """How many times fewer parameters a rank-``r`` adapter trains than ``W``."""
    return (n * k) / ((n + k) * r)


@dataclass
class BudgetSchedule:
    """Number of singular values kept at each step.

    Constant at ``initial`` for ``t < warmup``, then a linear ramp down to
    ``final`` at ``t = total``, rounded down.
    """

    initial: int
    final: int
    total: int
    warmup: int = 0
    step: int = 0

    def __post_init__(self):
        if self.final < 0 or self.final > self.initial:
            raise ScheduleError(f"need 0 <= final <= initial, got {self.final}, {self.initial}")
        if self.total < 0 or not 0 <= self.warmup <= self.total:
            raise ScheduleError(f"need 0 <= warmup <= total, got {self.warmup}, {self.total}")

    def budget(self) -> int:
        return budget_at(self, self.step)

    def advance(self) -> None:
        if self.step < self.total:
            self.step += 1


def budget_at(schedule: BudgetSchedule, t: int) -> int:
    if t < 0 or t > schedule.total:
        raise ScheduleError(f"step {t} outside [0, {schedule.total}]")
    if t < schedule.warmup:
        return schedule.initial
    span = schedule.total - schedule.warmup
    if span == 0:
        return schedule.final
    drop = schedule.initial - schedule.final
    return schedule.final + (drop * (schedule.total - t)) // span


def abs_lambda(adapter: "AdaLoraAdapter") -> np.ndarray:
    return np.abs(adapter.lam.data[0])


class AdaLoraAdapter:
    """SVD-shaped adapter ``P diag(lam) Q`` with a shrinking rank budget.

    ``lam`` is a 1 x r row vector. ``mask`` marks surviving singular values;
    pruned entries are held at zero and receive no gradient.
    """

    kind = "adalora"

    def __init__(
        self,
        d1: int,
        d2: int,
        r: int,
        rng: np.random.Generator | None = None,
        gamma: float = DEFAULT_GAMMA,
        schedule: BudgetSchedule | None = None,
        score_fn: Callable[["AdaLoraAdapter"], np.ndarray] = abs_lambda,
        dtype=np.float64,
    ):
        _check_rank(d1, d2, r)
        if gamma < 0:
            raise AdapterConfigError(f"gamma must be non-negative, got {gamma}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.d1, self.d2, self.r = d1, d2, r
        self.gamma = float(gamma)
        self.P = Tensor(rng.normal(0.0, INIT_STD, size=(d1, r)).astype(dtype), requires_grad=True)
        self.lam = Tensor(np.zeros((1, r), dtype=dtype), requires_grad=True)
        self.Q = Tensor(rng.normal(0.0, INIT_STD, size=(r, d2)).astype(dtype), requires_grad=True)
        self.mask = np.ones(r, dtype=bool)
        self.schedule = schedule if schedule is not None else BudgetSchedule(r, r, 0)
        if self.schedule.initial > r:
            raise ScheduleError(f"initial budget {self.schedule.initial} exceeds rank {r}")
        self.score_fn = score_fn

    # alias matching the LoRA interface
    @property
    def n(self) -> int:
        return self.d1

    @property
    def k(self) -> int:
        return self.d2

    def parameters(self) -> list[Tensor]:
        return [self.P, self.lam, self.Q]

    def num_trainable(self) -> int:
        return self.r * (self.d1 + self.d2 + 1)

    def effective_rank(self) -> int:
        return int(self.mask.sum())

    def masked_lambda(self) -> Tensor:
        return mul(self.lam, Tensor(self.mask.astype(self.lam.dtype).reshape(1, -1)))

    def delta(self, x: Tensor) -> Tensor:
        if x.cols != self.d1:
            raise DimensionError(f"adapter expects inputs with {self.d1} columns, got {x.shape}")
        return matmul(scale_cols(matmul(x, self.P), self.masked_lambda()), self.Q)

    def delta_weight(self) -> np.ndarray:
        return (self.P.data * (self.lam.data * self.mask)) @ self.Q.data

    def state(self) -> dict[str, Tensor]:
        return {"P": self.P, "lam": self.lam, "Q": self.Q}


def adalora_forward(x: Tensor, W: Tensor, adapter: AdaLoraAdapter) -> Tensor:
    if W.requires_grad:
        raise AdapterConfigError("base weight passed to adalora_forward must be frozen")
    if W.shape != (adapter.d1, adapter.d2):
        raise DimensionError(f"weight {W.shape} does not match adapter {(adapter.d1, adapter.d2)}")
    return add(matmul(x, W), adapter.delta(x))


def orthogonality_penalty(adapter: AdaLoraAdapter) -> Tensor:
    """``gamma * (||P^T P - I||_F^2 + ||Q Q^T - I||_F^2)`` as a 1x1 tensor."""
    P, Q = adapter.P, adapter.Q
    ident = eye(adapter.r, dtype=P.dtype)
    left = sum_squares(sub(matmul(transpose(P), P), ident))
    right = sum_squares(sub(matmul(Q, transpose(Q)), ident))
    return scale(add(left, right), adapter.gamma)


def importance_scores(adapter: AdaLoraAdapter) -> np.ndarray:
    """Score per singular value; ``nan`` at pruned indices."""
    scores = np.asarray(adapter.score_fn(adapter), dtype=np.float64).copy()
    scores[~adapter.mask] = np.nan
    return scores


def prune_step(adapter: AdaLoraAdapter) -> int:
    """Keep the top-``b^t`` singular values by score, zero the rest, advance ``t``.

    Ties go to the lower index. Returns the budget that was applied.
    """
    b = adapter.schedule.budget()
    alive = np.flatnonzero(adapter.mask)
    if b > alive.size:
        raise ScheduleError(
            f"budget {b} at step {adapter.schedule.step} exceeds the {alive.size} surviving values"
        )
    scores = importance_scores(adapter)[alive]
    order = alive[np.argsort(-scores, kind="stable")]
    keep = np.zeros_like(adapter.mask)
    keep[order[:b]] = True
    adapter.mask = keep
    adapter.lam.data = np.where(keep, adapter.lam.data, 0).astype(adapter.lam.dtype)
    adapter.schedule.advance()
    return b
