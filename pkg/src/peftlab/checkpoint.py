"""Tagged binary container for model state.

Layout (little-endian)::

    "PCK1"  u16 version  u32 entry count
    per entry:
        u8  tag            0 dense, 1 PQT1 block, 2 JSON
        u16 name length, name (utf-8)
        u64 payload length, payload
    u32 CRC32 of everything before it

A dense payload is ``u8 dtype (0 f64, 1 f32, 2 bool), u32 rows, u32 cols``
followed by the raw array. Entries are written in a fixed order so equal
states give equal bytes. Loading parses and checks the whole file before
anything is handed back.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pqt
from .adapters import AdaLoraAdapter, BudgetSchedule
from .pqt import FormatError
from .qlora import QloraLinear
from .quant import QuantizedTensor
from .transformer import PROJECTIONS, ToyTransformer, attach_adapters

MAGIC = b"PCK1"
VERSION = 1

DENSE, QUANT, META = 0, 1, 2
_DTYPES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype(bool): 2}
_CODES = {v: k for k, v in _DTYPES.items()}
_HEAD = struct.Struct("<4sHI")
_ENTRY = struct.Struct("<BH")
_DENSE_HEAD = struct.Struct("<BII")


@dataclass
class Checkpoint:
    dense: dict[str, np.ndarray] = field(default_factory=dict)
    quantized: dict[str, bytes] = field(default_factory=dict)
    meta: dict[str, dict] = field(default_factory=dict)

    def quantized_tensor(self, name: str) -> QuantizedTensor:
        return pqt.load(self.quantized[name])


def _dense_payload(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.dtype not in _DTYPES:
        raise TypeError(f"cannot store dtype {arr.dtype}")
    code = _DTYPES[arr.dtype]
    return _DENSE_HEAD.pack(code, *arr.shape) + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    entries = []
    for name in sorted(ckpt.meta):
        body = json.dumps(ckpt.meta[name], sort_keys=True, separators=(",", ":")).encode()
        entries.append((META, name, body))
    for name in sorted(ckpt.dense):
        entries.append((DENSE, name, _dense_payload(ckpt.dense[name])))
    for name in sorted(ckpt.quantized):
        entries.append((QUANT, name, ckpt.quantized[name]))
    out = bytearray(_HEAD.pack(MAGIC, VERSION, len(entries)))
    for tag, name, body in entries:
        raw = name.encode()
        out += _ENTRY.pack(tag, len(raw)) + raw + struct.pack("<Q", len(body)) + body
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < _HEAD.size + 4:
        raise FormatError("file too short for a checkpoint", len(buf))
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", 4)
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    body_end = len(buf) - 4
    pos = _HEAD.size
    ckpt = Checkpoint()
    for _ in range(count):
        if pos + _ENTRY.size > body_end:
            raise FormatError("truncated entry header", pos)
        tag, nlen = _ENTRY.unpack_from(buf, pos)
        pos += _ENTRY.size
        if pos + nlen + 8 > body_end:
            raise FormatError("truncated entry name", pos)
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (plen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + plen > body_end:
            raise FormatError(f"truncated payload for {name!r}", pos)
        body = bytes(buf[pos : pos + plen])
        if tag == META:
            ckpt.meta[name] = json.loads(body)
        elif tag == DENSE:
            ckpt.dense[name] = _parse_dense(body, pos)
        elif tag == QUANT:
            pqt.load(body)  # validate now so nothing half-parsed escapes
            ckpt.quantized[name] = body
        else:
            raise FormatError(f"unknown entry tag {tag}", pos - nlen - 8 - _ENTRY.size)
        pos += plen
    if pos != body_end:
        raise FormatError("unexpected bytes before checksum", pos)
    if zlib.crc32(buf[:body_end]) != crc:
        raise FormatError("checksum mismatch", body_end)
    return ckpt


def _parse_dense(body: bytes, offset: int) -> np.ndarray:
    if len(body) < _DENSE_HEAD.size:
        raise FormatError("truncated dense header", offset)
    code, rows, cols = _DENSE_HEAD.unpack_from(body, 0)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", offset)
    dtype = _CODES[code]
    if len(body) - _DENSE_HEAD.size != rows * cols * dtype.itemsize:
        raise FormatError("dense payload size does not match its shape", offset)
    return np.frombuffer(body, dtype=dtype, offset=_DENSE_HEAD.size).reshape(rows, cols).copy()


def save(ckpt: Checkpoint, path: str | Path) -> int:
    data = encode(ckpt)
    Path(path).write_bytes(data)
    return len(data)


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# model state


def capture(model: ToyTransformer, extra: dict | None = None) -> Checkpoint:
    """Snapshot a model with its adapters, masks and schedule positions."""
    ckpt = Checkpoint()
    adapters = model.adapters()
    kinds = sorted({a.kind for a in adapters.values()})
    first = next(iter(adapters.values()), None)
    info = {
        "vocab": model.vocab,
        "d_model": model.d_model,
        "n_layers": model.n_layers,
        "max_len": model.max_len,
        "seed": model.seed,
        "dtype": np.dtype(model.dtype).name,
        "adapter_kind": kinds[0] if kinds else None,
        "adapter_targets": sorted({name.rsplit(".", 1)[1] for name in adapters}),
        "rank": first.r if first is not None else None,
    }
    if isinstance(first, AdaLoraAdapter):
        s = first.schedule
        info["gamma"] = first.gamma
        info["schedule"] = {"initial": s.initial, "final": s.final, "total": s.total, "warmup": s.warmup}
    ckpt.meta["model"] = info
    if extra:
        ckpt.meta["run"] = extra
    for name, t in model.base_tensors().items():
        ckpt.dense[f"base/{name}"] = t.data
    for name, q in model.quantized_tensors().items():
        ckpt.quantized[f"base/{name}"] = pqt.serialize(q)
    for name, a in adapters.items():
        for pname, t in a.state().items():
            ckpt.dense[f"adapter/{name}/{pname}"] = t.data
        if isinstance(a, AdaLoraAdapter):
            ckpt.dense[f"adapter/{name}/mask"] = a.mask
            ckpt.meta[f"schedule/{name}"] = {"step": a.schedule.step}
    return ckpt


def restore(ckpt: Checkpoint) -> ToyTransformer:
    """Rebuild the model a checkpoint was taken from."""
    try:
        info = ckpt.meta["model"]
        model = ToyTransformer(info["vocab"], info["d_model"], None, info["n_layers"], info["max_len"], info["seed"])
        if info["adapter_kind"] is not None:
            sched = info.get("schedule")
            attach_adapters(
                model,
                info["adapter_kind"],
                info["rank"],
                targets=info["adapter_targets"] or PROJECTIONS,
                gamma=info.get("gamma", 0.0),
                schedule=BudgetSchedule(**sched) if sched else None,
            )
        quantized = {k.split("/", 1)[1]: pqt.load(v) for k, v in ckpt.quantized.items()}
        for name, q in quantized.items():
            if name == "embed":
                model.embed.weight_q, model.embed.weight, model.embed.dtype = q, None, np.float32
                continue
            old = model.layers[name]
            model.layers[name] = QloraLinear(q, old.adapter)
        for name, att in model.attention.items():
            for p in PROJECTIONS:
                setattr(att, p, model.layers[f"{name}.{p}"])
        if quantized:
            model.dtype = np.float32
        for name, t in model.base_tensors().items():
            t.data = ckpt.dense[f"base/{name}"].copy()
            t.requires_grad = info["adapter_kind"] is None
        for name, a in model.adapters().items():
            for pname, t in a.state().items():
                t.data = ckpt.dense[f"adapter/{name}/{pname}"].copy()
            if isinstance(a, AdaLoraAdapter):
                a.mask = ckpt.dense[f"adapter/{name}/mask"][0].copy()
                a.schedule.step = ckpt.meta[f"schedule/{name}"]["step"]
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing entry {exc}", 0) from None
    return model


def save_checkpoint(model: ToyTransformer, path: str | Path, extra: dict | None = None) -> int:
    return save(capture(model, extra), path)


def load_checkpoint(path: str | Path) -> ToyTransformer:
    return restore(load(path))
