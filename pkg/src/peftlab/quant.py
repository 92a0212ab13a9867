"""Affine and NF4 quantization at tensor, row or block granularity.

Values are split into groups, each group gets its own constants, and codes
are stored bit-packed (two per byte at 4 bits). Rounding is always
round-half-to-even (``np.rint``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from statistics import NormalDist

import numpy as np

from .tensor import Tensor

ASYMMETRIC = "asymmetric"
SYMMETRIC = "symmetric"
NF4 = "nf4"

PER_TENSOR = "tensor"
PER_ROW = "row"
PER_BLOCK = "block"

DEFAULT_BLOCK = 64
SUPER_BLOCK = 256
NF4_TAIL_PROB = 1 / 32


class QuantError(ValueError):
    """Raised for invalid quantization arguments."""


class IntegrityError(ValueError):
    """Raised when stored codes or constants fall outside their valid range."""


@dataclass(frozen=True)
class QuantScheme:
    kind: str = NF4
    bits: int = 4

    def __post_init__(self):
        if self.kind not in (ASYMMETRIC, SYMMETRIC, NF4):
            raise QuantError(f"unknown scheme kind {self.kind!r}")
        if self.kind == NF4 and self.bits != 4:
            raise QuantError("nf4 is a 4-bit scheme")
        if self.bits not in (4, 8):
            raise QuantError(f"bits must be 4 or 8, got {self.bits}")

    @property
    def qmin(self) -> int:
        if self.kind == NF4:
            return 0
        if self.kind == SYMMETRIC:
            return -(2 ** (self.bits - 1) - 1)
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        if self.kind == NF4:
            return 15
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def parse(cls, name: str) -> "QuantScheme":
        """Accepts ``nf4``, ``int8``, ``int4``, ``sym8``, ``asym4`` and the like."""
        name = name.lower()
        if name == NF4:
            return cls(NF4, 4)
        for prefix, kind in (("asym", ASYMMETRIC), ("sym", SYMMETRIC), ("int", SYMMETRIC)):
            if name.startswith(prefix) and name[len(prefix):].isdigit():
                return cls(kind, int(name[len(prefix):]))
        raise QuantError(f"cannot parse scheme {name!r}")

    def __str__(self) -> str:
        return NF4 if self.kind == NF4 else f"{'asym' if self.kind == ASYMMETRIC else 'sym'}{self.bits}"


@dataclass(frozen=True)
class Granularity:
    kind: str = PER_BLOCK
    block_size: int = DEFAULT_BLOCK

    def __post_init__(self):
        if self.kind not in (PER_TENSOR, PER_ROW, PER_BLOCK):
            raise QuantError(f"unknown granularity {self.kind!r}")
        if self.kind == PER_BLOCK and self.block_size < 1:
            raise QuantError("block size must be positive")

    def group_size(self, rows: int, cols: int) -> int:
        if self.kind == PER_TENSOR:
            return max(rows * cols, 1)
        if self.kind == PER_ROW:
            return max(cols, 1)
        return self.block_size

    def group_count(self, rows: int, cols: int) -> int:
        n = rows * cols
        return -(-n // self.group_size(rows, cols)) if n else 0


def per_tensor() -> Granularity:
    return Granularity(PER_TENSOR, 0)


def per_row() -> Granularity:
    return Granularity(PER_ROW, 0)


def per_block(size: int = DEFAULT_BLOCK) -> Granularity:
    return Granularity(PER_BLOCK, size)


@lru_cache(maxsize=None)
def _nf4_values() -> tuple[float, ...]:
    inv = NormalDist().inv_cdf
    p0 = NF4_TAIL_PROB
    # 9 probabilities on [p0, 1/2] -> 8 negatives once the median is dropped
    neg = [inv(p0 + (0.5 - p0) * i / 8) for i in range(8)]
    # 8 probabilities on [1/2, 1 - p0] -> 7 positives
    pos = [inv(0.5 + (0.5 - p0) * i / 7) for i in range(1, 8)]
    neg = [v / -neg[0] for v in neg]
    pos = [v / pos[-1] for v in pos]
    neg[0], pos[-1] = -1.0, 1.0
    return tuple(sorted(neg + [0.0] + pos))


def build_nf4_codebook() -> np.ndarray:
    """The 16 NF4 levels: -1, 7 negative quantiles, 0, 6 positive quantiles, 1."""
    return np.array(_nf4_values(), dtype=np.float64)


def nf4_max_half_gap() -> float:
    return float(np.diff(build_nf4_codebook()).max() / 2)


@dataclass
class QuantConstants:
    """Per-group constants.

    ``scale`` is ``None`` once the scales have been double-quantized; the
    owning :class:`QuantizedTensor` then reconstructs them.
    """

    scale: np.ndarray | None
    zero_point: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.zero_point)


# floor for scales of groups whose range underflows when divided into steps
_TINY = np.finfo(np.float64).tiny


def _fit_groups(groups: np.ndarray, scheme: QuantScheme) -> QuantConstants:
    g = groups.astype(np.float64, copy=False)
    if g.shape[1] == 0:
        raise QuantError("cannot fit constants to an empty group")
    if not np.isfinite(g).all():
        raise QuantError("quantization input must be finite")
    zero = np.zeros(len(g), dtype=np.int64)
    if scheme.kind == ASYMMETRIC:
        # range always contains zero so that zero stays exactly representable
        rmin = np.minimum(g.min(axis=1), 0.0)
        rmax = np.maximum(g.max(axis=1), 0.0)
        span = rmax - rmin
        degen = span == 0
        s = np.where(degen, 1.0, np.maximum(span / (scheme.qmax - scheme.qmin), _TINY))
        z = np.rint(scheme.qmin - rmin / s)
        z = np.clip(np.where(degen, 0, z), scheme.qmin, scheme.qmax).astype(np.int64)
        return QuantConstants(s, z, degen)
    absmax = np.abs(g).max(axis=1)
    degen = absmax == 0
    denom = 1 if scheme.kind == NF4 else scheme.qmax
    s = np.where(degen, 1.0, np.maximum(absmax / denom, _TINY))
    return QuantConstants(s, zero, degen)


def fit_constants(x, scheme: QuantScheme) -> QuantConstants:
    """Constants for a single group of values."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return _fit_groups(arr.reshape(1, -1), scheme)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Two's-complement (or unsigned) codes to bytes; 4-bit codes go low nibble first."""
    c = np.asarray(codes, dtype=np.int64).reshape(-1)
    if bits == 8:
        return (c & 0xFF).astype(np.uint8).tobytes()
    nib = (c & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_codes(buf: bytes, count: int, bits: int, signed: bool) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits == 8:
        out = raw[:count].astype(np.int64)
        return np.where(out >= 128, out - 256, out) if signed else out
    nib = np.empty(raw.size * 2, dtype=np.int64)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    nib = nib[:count]
    return np.where(nib >= 8, nib - 16, nib) if signed else nib


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


@dataclass
class DoubleQuant:
    """Group scales quantized as symmetric int8 in super-groups of 256."""

    super_block: int
    super_absmax: np.ndarray
    codes: np.ndarray

    def scales(self) -> np.ndarray:
        idx = np.arange(len(self.codes)) // self.super_block
        # (code / 127) * absmax keeps a full-scale code exact
        return (self.codes.astype(np.float64) / 127.0) * self.super_absmax[idx]

    def bound(self) -> np.ndarray:
        """Per-scale reconstruction bound: half a super-group step."""
        idx = np.arange(len(self.codes)) // self.super_block
        return self.super_absmax[idx] / 127.0 / 2 * (1 + 1e-12)


def double_quantize_constants(scales, super_block: int = SUPER_BLOCK) -> DoubleQuant:
    s = np.asarray(scales.scale if isinstance(scales, QuantConstants) else scales, dtype=np.float64)
    if s.size == 0:
        raise QuantError("need at least one constant to double-quantize")
    n_super = -(-s.size // super_block)
    padded = np.zeros(n_super * super_block)
    padded[: s.size] = np.abs(s)
    absmax = padded.reshape(n_super, super_block).max(axis=1)
    absmax = np.where(absmax == 0, 1.0, absmax)
    idx = np.arange(s.size) // super_block
    codes = np.clip(np.rint(s / absmax[idx] * 127.0), -127, 127).astype(np.int8)
    return DoubleQuant(super_block, absmax, codes)


@dataclass
class QuantizedTensor:
    scheme: QuantScheme
    granularity: Granularity
    shape: tuple[int, int]
    packed: bytes
    constants: QuantConstants
    double_quant: DoubleQuant | None = None
    codebook: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def group_size(self) -> int:
        return self.granularity.group_size(*self.shape)

    @property
    def group_count(self) -> int:
        return len(self.constants)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.size, self.scheme.bits, self.scheme.kind != NF4)

    def scales(self) -> np.ndarray:
        if self.double_quant is not None:
            return self.double_quant.scales()
        return self.constants.scale

    def element_scales(self) -> np.ndarray:
        """The scale that applies to each element, flattened row-major."""
        return np.repeat(self.scales(), self.group_size)[: self.size]


def quantize(
    x,
    scheme: QuantScheme = QuantScheme(),
    granularity: Granularity = Granularity(),
    double_quant: bool = False,
) -> QuantizedTensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    rows, cols = arr.shape
    flat = arr.astype(np.float64).reshape(-1)
    n = flat.size
    if n == 0:
        raise QuantError("cannot quantize an empty tensor")
    gs = granularity.group_size(rows, cols)
    G = granularity.group_count(rows, cols)
    padded = np.zeros(G * gs)
    padded[:n] = flat
    groups = padded.reshape(G, gs)
    consts = _fit_groups(groups, scheme)
    y = groups / consts.scale[:, None]
    if scheme.kind == NF4:
        cb = build_nf4_codebook()
        codes = _nearest_code(np.clip(y, -1.0, 1.0), cb)
    else:
        codes = np.clip(np.rint(y + consts.zero_point[:, None]), scheme.qmin, scheme.qmax)
        codes = codes.astype(np.int64)
    codes = codes.reshape(-1)[:n]
    q = QuantizedTensor(
        scheme,
        granularity,
        (rows, cols),
        pack_codes(codes, scheme.bits),
        consts,
        codebook=build_nf4_codebook() if scheme.kind == NF4 else None,
    )
    if double_quant:
        q = apply_double_quant(q)
    return q


def apply_double_quant(q: QuantizedTensor, super_block: int = SUPER_BLOCK) -> QuantizedTensor:
    if q.double_quant is not None:
        return q
    dq = double_quantize_constants(q.constants.scale, super_block)
    consts = replace(q.constants, scale=None)
    return replace(q, constants=consts, double_quant=dq)


def _nearest_code(y: np.ndarray, cb: np.ndarray) -> np.ndarray:
    hi = np.clip(np.searchsorted(cb, y), 1, len(cb) - 1)
    lo = hi - 1
    d_lo = y - cb[lo]
    d_hi = cb[hi] - y
    # ties go to the level closer to zero
    tie_pick = np.where(np.abs(cb[lo]) <= np.abs(cb[hi]), lo, hi)
    return np.where(d_lo < d_hi, lo, np.where(d_hi < d_lo, hi, tie_pick)).astype(np.int64)


def check_integrity(q: QuantizedTensor, codes: np.ndarray | None = None) -> np.ndarray:
    codes = q.codes() if codes is None else codes
    s = q.scheme
    if codes.size and (codes.min() < s.qmin or codes.max() > s.qmax):
        bad = int(np.flatnonzero((codes < s.qmin) | (codes > s.qmax))[0])
        raise IntegrityError(f"code {int(codes[bad])} at element {bad} outside [{s.qmin}, {s.qmax}]")
    z = q.constants.zero_point
    if z.size and (z.min() < s.qmin or z.max() > s.qmax) and s.kind == ASYMMETRIC:
        raise IntegrityError("zero-point outside the quantized range")
    scales = q.scales()
    if not np.isfinite(scales).all() or (scales < 0).any():
        raise IntegrityError("scales must be finite and non-negative")
    return codes


def dequantize(q: QuantizedTensor, dtype=np.float64) -> Tensor:
    """Full-precision reconstruction with the original shape."""
    codes = check_integrity(q)
    scales = q.element_scales()
    if q.scheme.kind == NF4:
        cb = q.codebook if q.codebook is not None else build_nf4_codebook()
        values = scales * cb[codes]
    else:
        zp = np.repeat(q.constants.zero_point, q.group_size)[: q.size]
        values = scales * (codes - zp)
    return Tensor(values.reshape(q.shape).astype(dtype, copy=False))


def roundtrip_bound(q: QuantizedTensor) -> np.ndarray:
    """Largest reconstruction error each element may show, by construction.

    All-zero groups reconstruct exactly, so their bound is zero.
    """
    live = ~np.repeat(q.constants.degenerate, q.group_size)[: q.size]
    s = q.element_scales() * live
    if q.scheme.kind == NF4:
        return (s * nf4_max_half_gap()).reshape(q.shape)
    return (s / 2 + 1e-12).reshape(q.shape)


def nf4_grid_weight(rng: np.random.Generator, rows: int, cols: int, block: int = DEFAULT_BLOCK) -> np.ndarray:
    """A random matrix whose entries are NF4 levels and whose every block has absmax 1.

    Such a matrix survives NF4 quantization (with or without double
    quantization) exactly.
    """
    cb = build_nf4_codebook()
    idx = rng.integers(0, 16, size=rows * cols)
    idx[::block] = 15
    return cb[idx].reshape(rows, cols)


def max_abs_error(x: np.ndarray, q: QuantizedTensor) -> float:
    return float(np.abs(np.asarray(x, dtype=np.float64) - dequantize(q).data).max())


def bits_per_param(q: QuantizedTensor) -> float:
    from .pqt import footprint_bytes

    return 8 * footprint_bytes(q).total / q.size
