"""
Binary checkpoint persistence.

Layout (little-endian):
    magic "GCAC" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | rank u32 | extents u32 x rank |
               dtype code u8 | raw values
    CRC32 u32 of every preceding byte

Parameters are stored as dtype 0 (f32) in named_parameters() order. Two
metadata entries follow as dtype 1 (raw bytes): "__meta__.config" (the
ExperimentConfig JSON) and "__meta__.iteration" (u64).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import structlog
from django.conf import settings

from detection.exceptions import CheckpointError, CheckpointFormatError, UnknownParameterError
from detection.experiment import ExperimentConfig
from detection.nn import Module

logger = structlog.get_logger(__name__)

MAGIC = b"GCAC"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BYTES = 1
META_PREFIX = "__meta__."
CONFIG_ENTRY = "__meta__.config"
ITERATION_ENTRY = "__meta__.iteration"

HEADER_BYTES = 12
CRC_BYTES = 4
# name length + rank + dtype code
ENTRY_OVERHEAD = 9


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: Optional[ExperimentConfig]
    iteration: int


def _entry(name: str, array: np.ndarray, dtype_code: int) -> bytes:
    encoded = name.encode("utf-8")
    shape = array.shape
    parts = [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", len(shape))]
    parts.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(struct.pack("<B", dtype_code))
    if dtype_code == DTYPE_F32:
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    else:
        parts.append(np.ascontiguousarray(array, dtype=np.uint8).tobytes())
    return b"".join(parts)


def encode_checkpoint(params: dict[str, np.ndarray], config: Optional[ExperimentConfig], iteration: int) -> bytes:
    entries = [_entry(name, np.asarray(value), DTYPE_F32) for name, value in params.items()]
    if config is not None:
        blob = np.frombuffer(config.to_json().encode("utf-8"), dtype=np.uint8)
        entries.append(_entry(CONFIG_ENTRY, blob, DTYPE_BYTES))
    entries.append(_entry(ITERATION_ENTRY, np.frombuffer(struct.pack("<Q", iteration), dtype=np.uint8), DTYPE_BYTES))
    body = MAGIC + struct.pack("<II", VERSION, len(entries)) + b"".join(entries)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, model: Module, config: Optional[ExperimentConfig] = None, iteration: int = 0) -> Path:
    """Write model parameters (as f32), config and iteration to path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(model.state_dict(), config, iteration)
    path.write_bytes(data)
    logger.info("checkpoint_saved", path=str(path), bytes=len(data), iteration=iteration)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointFormatError: on bad magic, unsupported version, CRC mismatch
            or truncation
    """
    if len(data) < HEADER_BYTES + CRC_BYTES:
        raise CheckpointFormatError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {data[:4]!r}")
    body, (crc,) = data[:-CRC_BYTES], struct.unpack("<I", data[-CRC_BYTES:])
    reader = _Reader(body)
    reader.take(4)
    version = reader.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointFormatError("checkpoint CRC mismatch")
    count = reader.u32()
    params: dict[str, np.ndarray] = {}
    config, iteration = None, 0
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        code = struct.unpack("<B", reader.take(1))[0]
        size = int(np.prod(shape, dtype=np.int64))
        if code == DTYPE_F32:
            value = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        elif code == DTYPE_BYTES:
            value = np.frombuffer(reader.take(size), dtype=np.uint8)
        else:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name!r}")
        if name == CONFIG_ENTRY:
            config = ExperimentConfig.from_json(value.tobytes().decode("utf-8"))
        elif name == ITERATION_ENTRY:
            iteration = struct.unpack("<Q", value.tobytes())[0]
        elif name.startswith(META_PREFIX):
            continue
        else:
            params[name] = value
    if reader.pos != len(body):
        raise CheckpointFormatError("trailing bytes after the last checkpoint entry")
    return Checkpoint(params, config, iteration)


def load_checkpoint(path, model: Optional[Module] = None, strict: Optional[bool] = None) -> Checkpoint:
    """
    Read a checkpoint and, when a model is given, copy its parameters in.

    In strict mode (default: GCA_STRICT_CHECKPOINTS) a parameter path present
    on one side only is an error; otherwise such entries are skipped.

    Raises:
        CheckpointFormatError: for malformed files
        UnknownParameterError: for path mismatches in strict mode
        CheckpointError: for shape mismatches or unreadable files
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    checkpoint = decode_checkpoint(data)
    if model is None:
        return checkpoint
    if strict is None:
        strict = getattr(settings, "GCA_STRICT_CHECKPOINTS", True)
    named = dict(model.named_parameters())
    unknown = sorted(set(checkpoint.params) - set(named))
    missing = sorted(set(named) - set(checkpoint.params))
    if strict and (unknown or missing):
        raise UnknownParameterError(
            f"checkpoint/model parameter mismatch: unknown={unknown[:5]} missing={missing[:5]}"
        )
    for name, value in checkpoint.params.items():
        param = named.get(name)
        if param is None:
            continue
        if param.shape != value.shape:
            raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {param.shape}")
        param.data = value.astype(param.data.dtype)
    if unknown or missing:
        logger.warning("checkpoint_partial_load", unknown=len(unknown), missing=len(missing))
    return checkpoint


def expected_size(model: Module, config: Optional[ExperimentConfig] = None) -> int:
    """Byte size of a checkpoint of this model, computed from the parameter census."""
    size = HEADER_BYTES + CRC_BYTES
    for name, param in model.named_parameters():
        size += ENTRY_OVERHEAD + len(name.encode("utf-8")) + 4 * param.ndim + 4 * param.size
    if config is not None:
        size += ENTRY_OVERHEAD + len(CONFIG_ENTRY) + 4 + len(config.to_json().encode("utf-8"))
    size += ENTRY_OVERHEAD + len(ITERATION_ENTRY) + 4 + 8
    return size
