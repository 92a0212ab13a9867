"""A small single-head encoder-decoder transformer.

Each block is attention with a residual connection followed by one
``tanh`` linear map with a residual connection. There is no layer norm.
Adapters attach to the query, key and value projections of every attention
layer (encoder self-attention, decoder self-attention, decoder cross-attention).

Batches are packed into one matrix with a block-diagonal attention mask, so a
whole batch is a handful of matrix operations.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdaLoraAdapter, BudgetSchedule, LoraAdapter, DEFAULT_GAMMA
from .qlora import QloraLinear, dequant_matmul
from .quant import Granularity, QuantizedTensor, QuantScheme, dequantize, per_block, quantize
from .tasks import BOS, EOS
from .tensor import (
    DimensionError,
    Tensor,
    add,
    cross_entropy,
    embedding,
    matmul,
    no_grad,
    scale,
    softmax_rows,
    tanh,
    transpose,
)

PROJECTIONS = ("W_Q", "W_K", "W_V")

# small initial logits and token embeddings; without layer norm, plain SGD
# on this model diverges or stalls at unit scale
EMBED_STD = 0.3
OUT_GAIN = 0.1


class ModelConfigError(ValueError):
    """Raised for inconsistent model or adapter settings."""


class Linear:
    """``x @ W`` with an optional additive adapter."""

    def __init__(self, weight: np.ndarray, trainable: bool = False):
        self.weight = Tensor(weight, requires_grad=trainable)
        self.adapter: LoraAdapter | AdaLoraAdapter | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def attach(self, adapter) -> None:
        if (adapter.n, adapter.k) != self.shape:
            raise DimensionError(f"adapter {(adapter.n, adapter.k)} does not fit weight {self.shape}")
        self.adapter = adapter

    def base_weight(self) -> Tensor:
        return self.weight

    def parameters(self) -> list[Tensor]:
        params = [self.weight] if self.weight.requires_grad else []
        return params + (self.adapter.parameters() if self.adapter is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.adapter is not None:
            y = add(y, self.adapter.delta(x))
        return y


class Embedding:
    def __init__(self, weight: np.ndarray, trainable: bool = False):
        self.weight = Tensor(weight, requires_grad=trainable)
        self.weight_q: QuantizedTensor | None = None
        self.dtype = self.weight.dtype

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.weight is not None and self.weight.requires_grad else []

    def quantize(self, scheme, granularity, double_quant) -> None:
        self.weight_q = quantize(self.weight, scheme, granularity, double_quant)
        self.weight = None
        self.dtype = np.float32

    def __call__(self, ids) -> Tensor:
        if self.weight_q is not None:
            return embedding(dequantize(self.weight_q, self.dtype), ids)
        return embedding(self.weight, ids)


@dataclass
class AttentionLayer:
    W_Q: Linear | QloraLinear
    W_K: Linear | QloraLinear
    W_V: Linear | QloraLinear
    d_k: int
    last_weights: np.ndarray | None = field(default=None, repr=False)

    def projections(self) -> dict[str, Linear | QloraLinear]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}


def self_attention(
    X: Tensor,
    layer: AttentionLayer,
    mask: np.ndarray | None = None,
    memory: Tensor | None = None,
) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V`` with ``Q`` from ``X`` and ``K, V`` from ``memory``.

    ``memory`` defaults to ``X``. The attention matrix is kept on
    ``layer.last_weights`` for inspection.
    """
    d_model = layer.W_Q.shape[0] if isinstance(layer.W_Q, Linear) else layer.W_Q.in_features
    if X.cols != d_model:
        raise DimensionError(f"attention expects {d_model} input columns, got {X.shape}")
    src = X if memory is None else memory
    Q = layer.W_Q(X)
    K = layer.W_K(src)
    V = layer.W_V(src)
    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(layer.d_k))
    A = softmax_rows(scores, mask)
    layer.last_weights = A.data
    return matmul(A, V)


def _positional(max_positions: int, d: int) -> np.ndarray:
    pos = np.arange(max_positions)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _block_mask(row_lens, col_lens, causal: bool = False) -> np.ndarray:
    rows, cols = sum(row_lens), sum(col_lens)
    mask = np.zeros((rows, cols), dtype=bool)
    r0 = c0 = 0
    for rl, cl in zip(row_lens, col_lens):
        block = np.ones((rl, cl), dtype=bool)
        if causal:
            block = np.tril(block)
        mask[r0 : r0 + rl, c0 : c0 + cl] = block
        r0 += rl
        c0 += cl
    return mask


class ToyTransformer:
    def __init__(
        self,
        vocab: int = 32,
        d_model: int = 32,
        d_k: int | None = None,
        n_layers: int = 2,
        max_len: int = 16,
        seed: int = 0,
    ):
        d_k = d_model if d_k is None else d_k
        if d_k != d_model:
            raise ModelConfigError("the residual stream needs d_k == d_model")
        if vocab < 3 or d_model < 1 or n_layers < 1 or max_len < 1:
            raise ModelConfigError("vocab >= 3 and positive sizes are required")
        self.vocab, self.d_model, self.d_k = vocab, d_model, d_k
        self.n_layers, self.max_len, self.seed = n_layers, max_len, seed
        self.dtype = np.float64
        rng = np.random.default_rng(seed)
        d = d_model

        def w(n, k):
            return rng.normal(0.0, 1.0 / math.sqrt(n), size=(n, k))

        self.embed = Embedding(rng.normal(0.0, EMBED_STD, size=(vocab, d)))
        self.pos = _positional(max_len + 2, d)
        self.layers: OrderedDict[str, Linear | QloraLinear] = OrderedDict()
        self.attention: OrderedDict[str, AttentionLayer] = OrderedDict()
        for side, kinds in (("enc", ("self",)), ("dec", ("self", "cross"))):
            for i in range(n_layers):
                for kind in kinds:
                    name = f"{side}{i}.{kind}"
                    projs = {p: Linear(w(d, d_k)) for p in PROJECTIONS}
                    for p, lin in projs.items():
                        self.layers[f"{name}.{p}"] = lin
                    self.attention[name] = AttentionLayer(d_k=d_k, **projs)
                self.layers[f"{side}{i}.ff"] = Linear(w(d, d))
        self.layers["out"] = Linear(OUT_GAIN * w(d, vocab))

    # parameters

    def set_base_trainable(self, flag: bool) -> None:
        for lin in self.layers.values():
            if isinstance(lin, Linear):
                lin.weight.requires_grad = flag
        if self.embed.weight is not None:
            self.embed.weight.requires_grad = flag

    def base_tensors(self) -> dict[str, Tensor]:
        out = {}
        if self.embed.weight is not None:
            out["embed"] = self.embed.weight
        for name, lin in self.layers.items():
            if isinstance(lin, Linear):
                out[name] = lin.weight
        return out

    def quantized_tensors(self) -> dict[str, QuantizedTensor]:
        out = {}
        if self.embed.weight_q is not None:
            out["embed"] = self.embed.weight_q
        for name, lin in self.layers.items():
            if isinstance(lin, QloraLinear):
                out[name] = lin.weight_q
        return out

    def adapters(self) -> dict[str, LoraAdapter | AdaLoraAdapter]:
        return {name: lin.adapter for name, lin in self.layers.items() if lin.adapter is not None}

    def trainable_parameters(self) -> list[Tensor]:
        params = self.embed.parameters()
        for lin in self.layers.values():
            params.extend(lin.parameters())
        return params

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self.trainable_parameters())

    def num_base_parameters(self) -> int:
        n = sum(t.data.size for t in self.base_tensors().values())
        return n + sum(q.size for q in self.quantized_tensors().values())

    # structure changes

    def quantize_base(
        self,
        scheme: QuantScheme = QuantScheme(),
        granularity: Granularity | None = None,
        double_quant: bool | None = None,
    ) -> None:
        """Replace every base weight by a frozen quantized copy; compute becomes 32-bit."""
        granularity = per_block() if granularity is None else granularity
        if double_quant is None:
            double_quant = scheme.kind == "nf4"
        for name, lin in list(self.layers.items()):
            if isinstance(lin, QloraLinear):
                continue
            q = QloraLinear(quantize(lin.weight, scheme, granularity, double_quant))
            if lin.adapter is not None:
                q.attach(_cast_adapter(lin.adapter, np.float32))
            self.layers[name] = q
        for name, att in self.attention.items():
            for p in PROJECTIONS:
                setattr(att, p, self.layers[f"{name}.{p}"])
        self.embed.quantize(scheme, granularity, double_quant)
        self.dtype = np.float32

    # forward

    def _embed(self, seqs: list[list[int]]) -> Tensor:
        ids = [t for s in seqs for t in s]
        pos = np.concatenate([self.pos[: len(s)] for s in seqs]).astype(self.dtype)
        return add(self.embed(ids), Tensor(pos))

    def _block(self, x: Tensor, name: str, mask, memory=None, memory_mask=None) -> Tensor:
        x = add(x, self_attention(x, self.attention[f"{name}.self"], mask))
        if memory is not None:
            x = add(x, self_attention(x, self.attention[f"{name}.cross"], memory_mask, memory))
        return add(x, tanh(self.layers[f"{name}.ff"](x)))

    def encode(self, sources: list[list[int]]) -> Tensor:
        lens = [len(s) for s in sources]
        if min(lens) == 0:
            raise DimensionError("cannot encode an empty source")
        if max(lens) > self.max_len:
            raise DimensionError(f"source longer than max_len={self.max_len}")
        x = self._embed(sources)
        mask = _block_mask(lens, lens)
        for i in range(self.n_layers):
            x = self._block(x, f"enc{i}", mask)
        return x

    def decode(self, memory: Tensor, src_lens: list[int], dec_inputs: list[list[int]]) -> Tensor:
        dec_lens = [len(s) for s in dec_inputs]
        x = self._embed(dec_inputs)
        self_mask = _block_mask(dec_lens, dec_lens, causal=True)
        cross_mask = _block_mask(dec_lens, src_lens)
        for i in range(self.n_layers):
            x = self._block(x, f"dec{i}", self_mask, memory, cross_mask)
        return self.layers["out"](x)

    def logits(self, sources: list[list[int]], targets: list[list[int]]) -> Tensor:
        """Teacher-forced logits, one row per predicted position (targets then EOS)."""
        memory = self.encode(sources)
        return self.decode(memory, [len(s) for s in sources], [[BOS] + list(t) for t in targets])

    def loss(self, sources, targets) -> Tensor:
        gold = [tok for t in targets for tok in list(t) + [EOS]]
        return cross_entropy(self.logits(sources, targets), gold)

    def greedy_decode(self, source: list[int], max_len: int | None = None) -> list[int]:
        return greedy_decode(self, source, max_len)


def greedy_decode(model: ToyTransformer, source: list[int], max_len: int | None = None) -> list[int]:
    """Argmax decoding; ties go to the lowest token id. Output ends with EOS if one was emitted."""
    max_len = model.max_len + 1 if max_len is None else max_len
    if len(source) == 0:
        return [EOS]
    out: list[int] = []
    with no_grad():
        memory = model.encode([source])
        while len(out) < max_len:
            logits = model.decode(memory, [len(source)], [[BOS] + out]).data
            tok = int(np.argmax(logits[-1]))
            out.append(tok)
            if tok == EOS or len(out) >= model.max_len + 1:
                break
    return out


def _cast_adapter(adapter, dtype):
    for p in adapter.parameters():
        p.data = p.data.astype(dtype)
    return adapter


def attach_adapters(
    model: ToyTransformer,
    kind: str = "lora",
    r: int = 8,
    targets=PROJECTIONS,
    rng: np.random.Generator | None = None,
    gamma: float = DEFAULT_GAMMA,
    schedule: BudgetSchedule | None = None,
) -> ToyTransformer:
    """Give every attention projection named in ``targets`` a fresh adapter and freeze the base.

    AdaLoRA adapters each get their own copy of ``schedule``.
    """
    targets = tuple(targets)
    bad = [t for t in targets if t not in PROJECTIONS]
    if bad or not targets:
        raise ModelConfigError(f"unknown adapter targets {bad or targets}; choose from {PROJECTIONS}")
    if kind not in ("lora", "adalora"):
        raise ModelConfigError(f"unknown adapter kind {kind!r}")
    if not 1 <= r <= min(model.d_model, model.d_k):
        raise ModelConfigError(f"rank {r} must lie in [1, {min(model.d_model, model.d_k)}]")
    rng = np.random.default_rng(model.seed + 1) if rng is None else rng
    model.set_base_trainable(False)
    for name, att in model.attention.items():
        for p in targets:
            layer = model.layers[f"{name}.{p}"]
            n, k = layer.shape if isinstance(layer, Linear) else layer.weight_q.shape
            if kind == "lora":
                adapter = LoraAdapter(n, k, r, rng, dtype=model.dtype)
            else:
                sched = None
                if schedule is not None:
                    sched = BudgetSchedule(schedule.initial, schedule.final, schedule.total, schedule.warmup)
                adapter = AdaLoraAdapter(n, k, r, rng, gamma=gamma, schedule=sched, dtype=model.dtype)
            layer.attach(adapter)
    return model


def count_attention_layers(model: ToyTransformer) -> int:
    return len(model.attention)
