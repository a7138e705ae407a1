"""Binary checkpoint format for named tensors.

Layout (all integers little-endian)::

    b"MGNT"  u32 version  u32 entry_count
    per entry:  u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 rank,
                u32 dims[rank], u64 payload_offset (from start of file)
    payloads, packed in entry order, no padding

Model kind and configuration travel as ``meta.*`` float64 entries so a
checkpoint is self-describing.
"""

from __future__ import annotations

import struct
from dataclasses import fields
from typing import List, Tuple

import numpy as np

from .config import BACKBONES, ModelConfig
from .errors import DataFormatError
from .model import ModelKind
from .params import ParamStore, is_buffer
from .tensor import Tensor

MAGIC = b"MGNT"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(entries: List[Tuple[str, np.ndarray]]) -> bytes:
    headers = []
    arrays = []
    for name, arr in entries:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise DataFormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise DataFormatError(f"entry {name!r}: name or rank too large")
        arrays.append(np.ascontiguousarray(arr, dtype=dt))
        headers.append((raw, _DTYPE_CODES[dt], arr.shape))
    header_len = 12 + sum(2 + len(raw) + 2 + 4 * len(shape) + 8 for raw, _, shape in headers)
    out = bytearray(MAGIC + struct.pack("<II", VERSION, len(entries)))
    offset = header_len
    for (raw, code, shape), arr in zip(headers, arrays):
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        out += struct.pack("<Q", offset)
        offset += arr.nbytes
    for arr in arrays:
        out += arr.tobytes()
    return bytes(out)


def decode(buf: bytes) -> List[Tuple[str, np.ndarray]]:
    def need(pos, n, what):
        if pos + n > len(buf):
            raise DataFormatError(f"truncated checkpoint while reading {what}")

    need(0, 12, "preamble")
    if buf[:4] != MAGIC:
        raise DataFormatError("not a checkpoint (bad magic bytes)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    pos = 12
    metas = []
    for i in range(count):
        need(pos, 2, f"entry {i} name length")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, n + 2, f"entry {i} name")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise DataFormatError(f"entry {name!r}: unknown dtype code {code}")
        need(pos, 4 * rank + 8, f"entry {name!r} dims")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        metas.append((name, _CODE_DTYPES[code], shape, offset))
    expected = pos
    out = []
    for name, dt, shape, offset in metas:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset != expected:
            raise DataFormatError(f"entry {name!r}: payload offset {offset}, expected {expected}")
        need(offset, nbytes, f"entry {name!r} payload")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
        out.append((name, arr.astype(dt.newbyteorder("="), copy=True)))
        expected = offset + nbytes
    if expected != len(buf):
        raise DataFormatError(f"checkpoint length {len(buf)} does not match declared size {expected}")
    return out


def _meta_entries(kind: ModelKind, cfg: ModelConfig):
    entries = [(f"meta.kind.{kind.value}", np.array(1.0))]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "backbone":
            entries.append((f"meta.cfg.backbone.{value}", np.array(1.0)))
        elif isinstance(value, tuple):
            entries.append((f"meta.cfg.{f.name}", np.array(value, dtype=np.float64)))
        else:
            entries.append((f"meta.cfg.{f.name}", np.array(float(value))))
    return entries


def save_checkpoint(path, store: ParamStore, kind, cfg: ModelConfig) -> None:
    kind = ModelKind.parse(kind)
    entries = _meta_entries(kind, cfg) + [(k, v.data) for k, v in store.items()]
    with open(path, "wb") as fh:
        fh.write(encode(entries))


def load_checkpoint(path):
    """Returns ``(store, kind, cfg)``."""
    with open(path, "rb") as fh:
        entries = decode(fh.read())
    store = ParamStore()
    kind = None
    cfg_values = {}
    int_fields = {f.name for f in fields(ModelConfig) if f.type in ("int", int)}
    for name, arr in entries:
        if name.startswith("meta.kind."):
            kind = ModelKind.parse(name[len("meta.kind."):])
        elif name.startswith("meta.cfg.backbone."):
            cfg_values["backbone"] = name[len("meta.cfg.backbone."):]
        elif name.startswith("meta.cfg."):
            key = name[len("meta.cfg."):]
            if arr.ndim:
                cfg_values[key] = tuple(int(v) for v in arr)
            elif key in int_fields:
                cfg_values[key] = int(arr)
            else:
                cfg_values[key] = float(arr)
        else:
            store[name] = Tensor.wrap(arr, requires_grad=not is_buffer(name), name=name)
    if kind is None:
        raise DataFormatError("checkpoint carries no model kind")
    if cfg_values.get("backbone", BACKBONES[0]) not in BACKBONES:
        raise DataFormatError(f"unknown backbone {cfg_values['backbone']!r}")
    return store, kind, ModelConfig(**cfg_values)


def manifest(path) -> List[Tuple[str, str, tuple, int]]:
    """(name, dtype, shape, payload offset) for every entry, in file order."""
    with open(path, "rb") as fh:
        buf = fh.read()
    decode(buf)
    rows = []
    pos = 12
    (count,) = struct.unpack_from("<I", buf, 8)
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        rows.append((name, "f32" if code == 0 else "f64", tuple(shape), offset))
    return rows
