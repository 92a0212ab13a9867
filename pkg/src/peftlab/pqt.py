"""The PQT1 binary layout for quantized tensors, and byte accounting.

Layout (all integers little-endian)::

    "PQT1"
    u8  scheme kind        0 asymmetric, 1 symmetric, 2 nf4
    u8  bits
    u32 rows, u32 cols
    u8  granularity kind   0 tensor, 1 row, 2 block
    u32 block size         0 unless per-block
    u32 group count G
    u8  constants flag     0 plain, 1 double-quantized
        plain: G x f64 scales
        double: u32 super block, u32 super count M, M x f64 super absmax, G x i8 codes
    [asymmetric] G x i8 zero-points
    ceil(G / 8) bytes of degenerate-group markers, LSB first
    [nf4] 16 x f64 codebook
    packed codes, ceil(rows * cols * bits / 8) bytes
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np

from .quant import (
    ASYMMETRIC,
    NF4,
    PER_BLOCK,
    PER_ROW,
    PER_TENSOR,
    SYMMETRIC,
    DoubleQuant,
    Granularity,
    QuantConstants,
    QuantizedTensor,
    QuantScheme,
    packed_size,
)
from .tensor import Tensor

MAGIC = b"PQT1"
_HEADER = struct.Struct("<4sBBIIBIIB")

_SCHEMES = {ASYMMETRIC: 0, SYMMETRIC: 1, NF4: 2}
_GRANS = {PER_TENSOR: 0, PER_ROW: 1, PER_BLOCK: 2}


class FormatError(ValueError):
    """Raised when a byte stream is not a valid PQT1 block."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def serialize(q: QuantizedTensor) -> bytes:
    G = q.group_count
    rows, cols = q.shape
    block = q.granularity.block_size if q.granularity.kind == PER_BLOCK else 0
    parts = [
        _HEADER.pack(
            MAGIC,
            _SCHEMES[q.scheme.kind],
            q.scheme.bits,
            rows,
            cols,
            _GRANS[q.granularity.kind],
            block,
            G,
            0 if q.double_quant is None else 1,
        )
    ]
    if q.double_quant is None:
        parts.append(np.asarray(q.constants.scale, dtype="<f8").tobytes())
    else:
        dq = q.double_quant
        parts.append(struct.pack("<II", dq.super_block, len(dq.super_absmax)))
        parts.append(np.asarray(dq.super_absmax, dtype="<f8").tobytes())
        parts.append(np.asarray(dq.codes, dtype=np.int8).tobytes())
    if q.scheme.kind == ASYMMETRIC:
        parts.append(np.asarray(q.constants.zero_point, dtype=np.int8).tobytes())
    parts.append(np.packbits(q.constants.degenerate.astype(np.uint8), bitorder="little").tobytes())
    if q.scheme.kind == NF4:
        parts.append(np.asarray(q.codebook, dtype="<f8").tobytes())
    parts.append(q.packed)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count, what), dtype=dtype).copy()


def deserialize(buf: bytes, offset: int = 0) -> tuple[QuantizedTensor, int]:
    """Parse one PQT1 block starting at ``offset``; returns it and the end offset."""
    r = _Reader(buf, offset)
    start = r.pos
    head = r.take(_HEADER.size, "header")
    magic, kind, bits, rows, cols, gkind, block, G, flag = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", start)
    try:
        scheme = QuantScheme({v: k for k, v in _SCHEMES.items()}[kind], bits)
        gname = {v: k for k, v in _GRANS.items()}[gkind]
        gran = Granularity(gname, block)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad scheme or granularity field: {exc}", start + 4) from None
    if gran.group_count(rows, cols) != G:
        raise FormatError(f"group count {G} inconsistent with shape {rows}x{cols}", start + 18)
    dq = None
    if flag == 0:
        scale = r.array("<f8", G, "scales")
    elif flag == 1:
        sb, m = struct.unpack("<II", r.take(8, "double-quant header"))
        absmax = r.array("<f8", m, "super scales")
        codes = r.array("i1", G, "scale codes")
        dq = DoubleQuant(sb, absmax, codes)
        scale = None
    else:
        raise FormatError(f"bad constants flag {flag}", start + _HEADER.size - 1)
    if scheme.kind == ASYMMETRIC:
        zp = r.array("i1", G, "zero-points").astype(np.int64)
    else:
        zp = np.zeros(G, dtype=np.int64)
    marks = np.frombuffer(r.take((G + 7) // 8, "markers"), dtype=np.uint8)
    degen = np.unpackbits(marks, bitorder="little")[:G].astype(bool)
    codebook = r.array("<f8", 16, "codebook") if scheme.kind == NF4 else None
    packed = r.take(packed_size(rows * cols, bits), "codes")
    q = QuantizedTensor(scheme, gran, (rows, cols), packed, QuantConstants(scale, zp, degen), dq, codebook)
    return q, r.pos


def load(buf: bytes) -> QuantizedTensor:
    q, end = deserialize(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after PQT1 block", end)
    return q


@dataclass(frozen=True)
class Footprint:
    header: int
    constants: int
    markers: int
    codebook: int
    codes: int

    @property
    def total(self) -> int:
        return self.header + self.constants + self.markers + self.codebook + self.codes

    def as_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


def footprint_bytes(x, element_bytes: int | None = None) -> Footprint:
    """Exact serialized size of a quantized tensor, or raw size of a dense one.

    For a dense :class:`Tensor`, ``element_bytes`` overrides the storage
    width (2 gives a 16-bit baseline).
    """
    if isinstance(x, Tensor) or isinstance(x, np.ndarray):
        arr = x.data if isinstance(x, Tensor) else x
        width = arr.dtype.itemsize if element_bytes is None else element_bytes
        return Footprint(0, 0, 0, 0, arr.size * width)
    q: QuantizedTensor = x
    G = q.group_count
    if q.double_quant is None:
        consts = 8 * G
    else:
        consts = 8 + 8 * len(q.double_quant.super_absmax) + G
    if q.scheme.kind == ASYMMETRIC:
        consts += G
    return Footprint(
        header=_HEADER.size,
        constants=consts,
        markers=(G + 7) // 8,
        codebook=16 * 8 if q.scheme.kind == NF4 else 0,
        codes=packed_size(q.size, q.scheme.bits),
    )


def reduction(quantized_bytes: int, params: int, baseline_bytes_per_param: int = 2) -> float:
    """Fractional size reduction against a dense baseline (16-bit by default)."""
    return 1.0 - quantized_bytes / (params * baseline_bytes_per_param)
