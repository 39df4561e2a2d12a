"""Binary checkpoint format.

Layout, all integers little-endian::

    b"DATC"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 data
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ContractError, LoadError
from ..segnet import Model
from .fileio import atomic_write_bytes

MAGIC = b"DATC"
VERSION = 1


def encode(records: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ContractError(f"tensor {name!r} cannot be stored (name or rank too large)")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode(blob: bytes, where: str = "<bytes>") -> list[tuple[str, np.ndarray]]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise LoadError(f"{where}: not a checkpoint (bad magic or truncated)")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise LoadError(f"{where}: checksum mismatch, file is corrupted")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise LoadError(f"{where}: unsupported checkpoint version {version}")
    pos, out = 12, []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", payload, pos)
            dims = struct.unpack_from(f"<{rank}I", payload, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out.append((name, data.astype(np.float32)))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise LoadError(f"{where}: malformed tensor record: {exc}") from exc
    if pos != len(payload):
        raise LoadError(f"{where}: {len(payload) - pos} trailing bytes after {count} tensors")
    return out


def save(path, records: list[tuple[str, np.ndarray]]) -> Path:
    return atomic_write_bytes(path, encode(records))


def load(path) -> list[tuple[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: cannot read checkpoint: {exc}") from exc
    return decode(blob, str(path))


def model_records(model: Model) -> list[tuple[str, np.ndarray]]:
    return [(layer.name, model[layer.name].data) for layer in model.layers]


def save_model(path, model: Model) -> Path:
    return save(path, model_records(model))


def load_into(model: Model, records: list[tuple[str, np.ndarray]], where: str = "checkpoint") -> Model:
    """Copy checkpoint tensors into ``model``; any layout difference is refused."""
    got = [(name, tuple(arr.shape)) for name, arr in records]
    if got != model.layout():
        want = dict(model.layout())
        for name, shape in got:
            if want.get(name) != shape:
                raise ContractError(f"{where}: tensor {name!r} {shape} does not match the model layout "
                                    f"(expected {want.get(name)})")
        raise ContractError(f"{where}: has {len(got)} tensors, model expects {len(want)}")
    for layer, (_, arr) in zip(model.layers, records):
        model.params[layer.offset:layer.offset + layer.size] = arr.reshape(-1)
    return model
