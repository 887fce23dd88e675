"""
Checkpoint file format (all integers little-endian u32):

  "STDB" | version | meta length | meta JSON {config, num_classes}
  | entry count | per entry: name length, name (UTF-8), rank, extents..., f64 data
  | CRC-32 of every preceding byte

Loading checks magic, version, layout and CRC before building any tensor.
A name length or rank past its limit cannot come from a cut file and is
reported with the CRC mismatch; running out of bytes anywhere else is
truncation.
"""

import json
import logging
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .config import Config
from .errors import (BadMagicError, ChecksumError, ContractError, PersistenceError,
                     TruncatedCheckpointError, UnsupportedVersionError)
from .net import ModelParams
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"STDB"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
MAX_NAME_BYTES = 1024
MAX_RANK = 8


def encode_checkpoint(params: ModelParams, config: Config) -> bytes:
    meta = json.dumps({"config": config.model_dump(mode="json"), "num_classes": params.num_classes},
                      sort_keys=True).encode("utf-8")
    parts: List[bytes] = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(meta)), meta, _U32.pack(len(params))]
    for name, tensor in params.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > MAX_NAME_BYTES or tensor.ndim > MAX_RANK:
            raise ContractError(f"cannot store tensor {name!r} of rank {tensor.ndim}")
        parts.append(_U32.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(tensor.ndim))
        parts.extend(_U32.pack(extent) for extent in tensor.shape)
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, raw: bytes, end: int, crc_note: str = ""):
        self.raw = raw
        self.end = end
        self.pos = 0
        self.crc_note = crc_note

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpointError(f"file ends inside {what} at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str, limit: Optional[int] = None) -> int:
        at = self.pos
        value = _U32.unpack(self.take(4, what))[0]
        if limit is not None and value > limit:
            raise ChecksumError(f"corrupt {what} {value} at byte {at}{self.crc_note}")
        return value


def _entries(reader: _Reader) -> List[Tuple[str, Tuple[int, ...], int]]:
    """Walk the entry table; returns (name, shape, data offset) without copying data."""
    entries = []
    for _ in range(reader.u32("entry count")):
        name = reader.take(reader.u32("name length", MAX_NAME_BYTES), "tensor name").decode("utf-8", errors="replace")
        rank = reader.u32(f"rank of {name}", MAX_RANK)
        shape = tuple(reader.u32(f"extents of {name}") for _ in range(rank))
        offset = reader.pos
        reader.take(8 * int(np.prod(shape, dtype=np.int64)), f"data of {name}")
        entries.append((name, shape, offset))
    return entries


def decode_checkpoint(raw: bytes) -> Tuple[ModelParams, Config]:
    if len(raw) < 4:
        raise TruncatedCheckpointError(f"file has only {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 8:
        raise TruncatedCheckpointError("file ends inside the version field")
    version = _U32.unpack(raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version}, this build reads {FORMAT_VERSION}")
    if len(raw) < 12:
        raise TruncatedCheckpointError("file ends before the checksum")

    stored = _U32.unpack(raw[-4:])[0]
    actual = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    mismatch = None if stored == actual else f"CRC mismatch: stored {stored:08x}, computed {actual:08x}"
    crc_note = f" ({mismatch})" if mismatch else ""

    reader = _Reader(raw, len(raw) - 4, crc_note)
    reader.pos = 8
    meta_raw = reader.take(reader.u32("meta length"), "meta block")
    entries = _entries(reader)
    if reader.pos != reader.end:
        raise ChecksumError(f"{reader.end - reader.pos} unexpected bytes before the checksum{crc_note}")
    if mismatch:
        raise ChecksumError(mismatch)

    try:
        meta = json.loads(meta_raw.decode("utf-8"))
        config = Config(**meta["config"])
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise PersistenceError(f"unreadable config snapshot: {e}") from e

    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    params = ModelParams(tensors)
    if "global.cls.weight" not in params or params.num_classes != meta.get("num_classes"):
        raise PersistenceError("tensor table does not match the recorded number of classes")
    return params, config


def save_checkpoint(params: ModelParams, config: Config, path: Union[str, Path]) -> None:
    raw = encode_checkpoint(params, config)
    try:
        Path(path).write_bytes(raw)
    except OSError as e:
        raise PersistenceError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written: {path} ({len(raw)} bytes, {len(params)} tensors)")


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, Config]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise PersistenceError(f"cannot read checkpoint {path}: {e}") from e
    params, config = decode_checkpoint(raw)
    logger.info(f"Checkpoint loaded: {path} ({params.count()} parameters)")
    return params, config
