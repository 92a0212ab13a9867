"""Synthetic seq2seq tasks with exact target oracles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

BOS = 0
EOS = 1
FIRST_SYMBOL = 2

TASKS = ("copy", "reverse", "summarize-synthetic")


@dataclass(frozen=True)
class TaskSpec:
    task: str = "copy"
    min_len: int = 1
    max_len: int = 8
    vocab: int = 16
    seed: int = 0
    stride: int = 2  # summarize-synthetic keeps every stride-th token

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.vocab <= FIRST_SYMBOL:
            raise ValueError(f"vocabulary of {self.vocab} leaves no room for symbols")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def task_target(spec: TaskSpec, source: list[int]) -> list[int]:
    if spec.task == "copy":
        return list(source)
    if spec.task == "reverse":
        return list(reversed(source))
    return list(source[:: spec.stride])


def sample_pairs(spec: TaskSpec, count: int, rng: np.random.Generator) -> list[tuple[list[int], list[int]]]:
    pairs = []
    for _ in range(count):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(FIRST_SYMBOL, spec.vocab, size=n).tolist()
        pairs.append((src, task_target(spec, src)))
    return pairs


def gen_dataset(spec: TaskSpec, count: int, path: str | Path | None = None, split: str = "train") -> list[dict]:
    """Deterministic examples from ``spec.seed``; written as JSON lines if ``path`` is given."""
    # train and held-out splits draw from independent streams of the same seed
    stream = {"train": 0, "heldout": 1}[split]
    rng = np.random.default_rng([spec.seed, stream])
    rows = [{"source": s, "target": t} for s, t in sample_pairs(spec, count, rng)]
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    return rows


def read_dataset(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
