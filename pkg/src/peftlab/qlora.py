"""Linear layers over a frozen quantized weight plus a LoRA adapter.

The full-precision weight is rebuilt from its codes on every forward call and
again during backward (to propagate the input gradient); nothing keeps it
alive in between.
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager

import numpy as np

from .adapters import AdaLoraAdapter, LoraAdapter
from .quant import (
    Granularity,
    QuantizedTensor,
    QuantScheme,
    dequantize,
    per_block,
    quantize,
)
from .tensor import DimensionError, Tensor, add, matmul, record

COMPUTE_DTYPE = np.float32


class MaterializationTracker:
    """Counts full-precision base weights that are alive at the same time."""

    def __init__(self):
        self.live = 0
        self.live_bytes = 0
        self.peak = 0
        self.peak_bytes = 0
        self.calls = 0

    def _on_create(self, arr: np.ndarray) -> None:
        self.calls += 1
        self.live += 1
        self.live_bytes += arr.nbytes
        self.peak = max(self.peak, self.live)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        weakref.finalize(arr, self._on_free, arr.nbytes)

    def _on_free(self, nbytes: int) -> None:
        self.live -= 1
        self.live_bytes -= nbytes


_tracker: MaterializationTracker | None = None


@contextmanager
def track_materialization():
    """Test hook: record how many dequantized weights coexist."""
    global _tracker
    prev, _tracker = _tracker, MaterializationTracker()
    try:
        yield _tracker
    finally:
        _tracker = prev


def _materialize(q: QuantizedTensor, dtype) -> np.ndarray:
    arr = dequantize(q).data.astype(dtype)
    if _tracker is not None:
        _tracker._on_create(arr)
    return arr


def dequant_matmul(x: Tensor, q: QuantizedTensor, cached: np.ndarray | None = None) -> Tensor:
    """``x @ dequantize(q)`` without retaining the dequantized weight.

    The quantized weight never receives a gradient; backward dequantizes again
    to form the gradient with respect to ``x``.
    """
    if x.cols != q.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {x.shape} by {q.shape}")
    dtype = x.dtype
    out = x.data @ (cached if cached is not None else _materialize(q, dtype))

    def bw(g):
        W = cached if cached is not None else _materialize(q, dtype)
        return (g @ W.T,)

    return record("dequant_matmul", out, (x,), bw)


class QloraLinear:
    """``y = x @ dequant(W_q) + x @ A @ B`` with only the adapter trainable."""

    def __init__(
        self,
        weight_q: QuantizedTensor,
        adapter: LoraAdapter | AdaLoraAdapter | None = None,
        cache_weight: bool = False,
        dtype=COMPUTE_DTYPE,
    ):
        self.weight_q = weight_q
        self.adapter = adapter
        self.dtype = dtype
        self.cache_weight = cache_weight
        self._cache: np.ndarray | None = None
        if adapter is not None:
            self._check_adapter(adapter)

    @classmethod
    def from_weight(
        cls,
        W,
        scheme: QuantScheme = QuantScheme(),
        granularity: Granularity | None = None,
        double_quant: bool | None = None,
        **kwargs,
    ) -> "QloraLinear":
        if granularity is None:
            granularity = per_block()
        if double_quant is None:
            double_quant = scheme.kind == "nf4"
        return cls(quantize(W, scheme, granularity, double_quant), **kwargs)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight_q.shape

    @property
    def in_features(self) -> int:
        return self.weight_q.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight_q.shape[1]

    def _check_adapter(self, adapter) -> None:
        if (adapter.n, adapter.k) != self.weight_q.shape:
            raise DimensionError(
                f"adapter shape {(adapter.n, adapter.k)} does not match weight {self.weight_q.shape}"
            )

    def attach(self, adapter) -> None:
        self._check_adapter(adapter)
        self.adapter = adapter

    def parameters(self) -> list[Tensor]:
        return self.adapter.parameters() if self.adapter is not None else []

    def base_weight(self) -> Tensor:
        return dequantize(self.weight_q, self.dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return qlora_forward(x, self)


def qlora_forward(x: Tensor, layer: QloraLinear) -> Tensor:
    cached = None
    if layer.cache_weight:
        if layer._cache is None:
            layer._cache = _materialize(layer.weight_q, layer.dtype)
        cached = layer._cache
    if x.dtype != layer.dtype:
        x = Tensor(x.data.astype(layer.dtype)) if not x.requires_grad else x
    y = dequant_matmul(x, layer.weight_q, cached)
    if layer.adapter is None:
        return y
    return add(y, layer.adapter.delta(x))


def qlora_backward(loss: Tensor, layer: QloraLinear):
    """Backward through a loss that used ``layer``; fills adapter gradients only."""
    from .tensor import backward

    tape = backward(loss)
    return tape
