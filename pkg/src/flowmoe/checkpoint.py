"""Single-file model checkpoints.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic ``b"FLOWMOE\\0"``
    8       4     format version (uint32, currently 1)
    12      4     header length H (uint32)
    16      H     header: UTF-8 JSON with model_config, train_config,
                  pipeline_stats (nullable) and metadata
    16+H    4     tensor count T (uint32)
    ...           T blocks, each:
                      2  name length N (uint16)
                      N  name (UTF-8)
                      1  rank R (uint8)
                      4R dimensions (uint32 each)
                      8*prod(dims) float64 data
    end-32  32    SHA-256 of every preceding byte

The tensor blocks carry the full ``state_dict`` (parameters and batch-norm
running statistics), so ``load(save(model))`` reproduces eval-mode outputs
bit-exactly.  Nothing time-dependent is written: two identically seeded runs
produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointIntegrityError, CheckpointVersionError
from .layers import Module
from .model import ModelConfig, build_model
from .pipeline import PipelineStats
from .tensor import RngState
from .training import TrainConfig

MAGIC = b"FLOWMOE\x00"
FORMAT_VERSION = 1


@dataclass
class LoadedCheckpoint:
    model: Module
    model_config: ModelConfig
    train_config: TrainConfig
    pipeline_stats: PipelineStats | None
    metadata: dict


def save_checkpoint(path, model: Module, train_config: TrainConfig,
                    pipeline_stats: PipelineStats | None = None,
                    metadata: dict | None = None) -> None:
    header = json.dumps({
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict(),
        "pipeline_stats": pipeline_stats.to_dict() if pipeline_stats else None,
        "metadata": metadata or {},
    }, sort_keys=True).encode()
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<I", FORMAT_VERSION))
    buffer.write(struct.pack("<I", len(header)))
    buffer.write(header)
    state = model.state_dict()
    buffer.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        array = np.ascontiguousarray(state[name], dtype=np.float64)
        encoded = name.encode()
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<B", array.ndim))
        for dim in array.shape:
            buffer.write(struct.pack("<I", dim))
        buffer.write(array.tobytes())
    payload = buffer.getvalue()
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def load_checkpoint(path) -> LoadedCheckpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 40 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointIntegrityError(f"{path} is not a flowmoe checkpoint")
    payload, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise CheckpointIntegrityError(
            f"checksum mismatch in {path}; the file is truncated or corrupt"
        )
    version, = struct.unpack_from("<I", payload, 8)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    header_len, = struct.unpack_from("<I", payload, 12)
    header = json.loads(payload[16:16 + header_len].decode())
    offset = 16 + header_len
    count, = struct.unpack_from("<I", payload, offset)
    offset += 4
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset:offset + name_len].decode()
        offset += name_len
        rank, = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", payload, offset) if rank else ()
        offset += 4 * rank
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        array = np.frombuffer(payload, dtype="<f8", count=n_values, offset=offset)
        state[name] = array.reshape(shape).copy()
        offset += 8 * n_values
    model_config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainConfig.from_dict(header["train_config"])
    stats = PipelineStats.from_dict(header["pipeline_stats"]) \
        if header["pipeline_stats"] else None
    model = build_model(model_config, RngState(0))
    model.load_state_dict(state)
    model.eval()
    return LoadedCheckpoint(
        model=model,
        model_config=model_config,
        train_config=train_config,
        pipeline_stats=stats,
        metadata=header["metadata"],
    )
