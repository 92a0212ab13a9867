"""Training loop for the toy transformer in the four fine-tuning modes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdaLoraAdapter, orthogonality_penalty, prune_step
from .qlora import QloraLinear
from .tasks import EOS, TaskSpec, sample_pairs
from .tensor import SgdConfig, add, backward, sgd_step
from .transformer import ToyTransformer, greedy_decode

MODES = ("full", "lora", "adalora", "qlora")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ModeError(ValueError):
    """Raised when a model is not set up for the requested training mode."""


@dataclass
class TrainingTrace:
    losses: list[float] = field(default_factory=list)
    penalties: list[float] = field(default_factory=list)
    budgets: list[int] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        """Mean task loss over the last 20 steps (or fewer if the run is shorter)."""
        tail = self.losses[-20:]
        return float(np.mean(tail))


def check_mode(model: ToyTransformer, mode: str) -> None:
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}; expected one of {MODES}")
    adapters = model.adapters()
    quantized = any(isinstance(l, QloraLinear) for l in model.layers.values())
    if mode == "full":
        if adapters:
            raise ModeError("full mode trains the base weights and forbids adapters")
        if quantized:
            raise ModeError("full mode needs a dense base")
        return
    if not adapters:
        raise ModeError(f"{mode} mode needs adapters attached")
    if any(t.requires_grad for t in model.base_tensors().values()):
        raise ModeError(f"{mode} mode needs a frozen base")
    kinds = {a.kind for a in adapters.values()}
    if mode == "adalora" and kinds != {"adalora"}:
        raise ModeError("adalora mode needs AdaLoRA adapters")
    if mode == "lora" and kinds != {"lora"}:
        raise ModeError("lora mode needs LoRA adapters")
    if mode == "qlora" and not quantized:
        raise ModeError("qlora mode needs a quantized base")
    if mode != "qlora" and quantized:
        raise ModeError(f"{mode} mode needs a dense base")


def train(
    model: ToyTransformer,
    task: TaskSpec,
    cfg: SgdConfig,
    mode: str,
    batch_size: int = 16,
    rng: np.random.Generator | None = None,
) -> TrainingTrace:
    """Run ``cfg.steps`` SGD steps on freshly sampled batches of ``task``.

    In adalora mode the orthogonality penalty of every adapter is added to the
    loss and each adapter is pruned right after its gradient step.
    """
    check_mode(model, mode)
    rng = np.random.default_rng(task.seed) if rng is None else rng
    params = model.trainable_parameters()
    ada = [a for a in model.adapters().values() if isinstance(a, AdaLoraAdapter)]
    trace = TrainingTrace()
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        pairs = sample_pairs(task, batch_size, rng)
        loss = model.loss([s for s, _ in pairs], [t for _, t in pairs])
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError("loss is not finite", step)
        total = loss
        if ada:
            pen = orthogonality_penalty(ada[0])
            for a in ada[1:]:
                pen = add(pen, orthogonality_penalty(a))
            trace.penalties.append(pen.item())
            total = add(loss, pen)
        backward(total)
        sgd_step(params, cfg)
        if ada:
            applied = [prune_step(a) for a in ada]
            trace.budgets.append(applied[0])
        trace.losses.append(value)
        trace.steps += 1
        trace.step_seconds.append(time.perf_counter() - t0)
    return trace


def total_penalty(model: ToyTransformer) -> float:
    ada = [a for a in model.adapters().values() if isinstance(a, AdaLoraAdapter)]
    return float(sum(orthogonality_penalty(a).item() for a in ada))


def decode_accuracy(model: ToyTransformer, pairs) -> float:
    """Fraction of sources whose greedy decode is exactly ``target + [EOS]``."""
    if not pairs:
        return 0.0
    hits = sum(greedy_decode(model, list(s)) == list(t) + [EOS] for s, t in pairs)
    return hits / len(pairs)
