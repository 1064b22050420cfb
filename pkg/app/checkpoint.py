"""The ``NFS1`` tensor container shared by checkpoints, gate bundles and image caches.

Layout: magic ``NFS1`` | uint32 LE header length | UTF-8 JSON header | float64 LE payload.
The header lists ``name``, ``shape`` and byte ``offset`` (relative to the start of the
payload) for every tensor, plus an optional free-form ``meta`` object.
"""
import json
import logging
import os
import struct
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator

from app.exception import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"NFS1"


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int

    @field_validator('shape')
    @classmethod
    def dims_non_negative(cls, v):
        if any(d < 0 for d in v):
            raise ValueError("shape dimensions must be non-negative")
        return v

    @field_validator('offset')
    @classmethod
    def offset_aligned(cls, v):
        if v < 0 or v % 8:
            raise ValueError("offset must be a non-negative multiple of 8")
        return v


class CheckpointHeader(BaseModel):
    tensors: List[TensorEntry]
    meta: Dict[str, Any] = {}


def encode(tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        array = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(array).tobytes())
        offset += array.size * 8
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic: expected {MAGIC!r}, got {blob[:4]!r}")
    (header_len,) = struct.unpack("<I", blob[4:8])
    header_end = 8 + header_len
    if header_end > len(blob):
        raise CheckpointFormatError("header length exceeds file size")
    try:
        header = CheckpointHeader.model_validate_json(blob[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, ValidationError) as e:
        raise CheckpointFormatError(f"unreadable header: {e}")

    payload = blob[header_end:]
    tensors, spans = {}, []
    for entry in header.tensors:
        count = int(np.prod(entry.shape)) if entry.shape else 1
        end = entry.offset + count * 8
        if end > len(payload):
            raise CheckpointFormatError(f"tensor '{entry.name}' runs past end of payload")
        if count:
            spans.append((entry.offset, end, entry.name))
        tensors[entry.name] = np.frombuffer(payload, dtype="<f8", count=count,
                                            offset=entry.offset).astype(np.float64).reshape(entry.shape)
    spans.sort()
    for (_, prev_end, prev_name), (start, _, name) in zip(spans, spans[1:]):
        if start < prev_end:
            raise CheckpointFormatError(f"tensors '{prev_name}' and '{name}' overlap in the payload")
    return tensors, header.meta


def save(path: str, tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(encode(tensors, meta))
    logger.info(f"Wrote NFS1 container {path} with {len(tensors)} tensors")
    return path


def load(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read {path}: {e}")
    return decode(blob)
