"""
Versioned binary parameter files

Layout: ``FDPG`` magic, uint16 format version, uint32 header length, a JSON
header listing tensor names and shapes in order, then the raw little-endian
float64 payload of each tensor. The encoding is a pure function of names,
shapes and values, so sizes and digests are stable across runs.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from feddpg.errors import ContractError
from feddpg.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"FDPG"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")

ParamMapping = Mapping[str, Union[Tensor, np.ndarray]]


def _as_array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = value.data if isinstance(value, Tensor) else value
    return np.ascontiguousarray(data, dtype="<f8")


def serialize_params(params: ParamMapping, kind: str) -> bytes:
    """Encode an ordered name → tensor mapping"""
    arrays = [(name, _as_array(value)) for name, value in params.items()]
    header = {
        "kind": kind,
        "dtype": "<f8",
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)), header_bytes]
    parts.extend(arr.tobytes(order="C") for _, arr in arrays)
    return b"".join(parts)


def deserialize_params(blob: bytes) -> Tuple[str, Dict[str, np.ndarray]]:
    """Decode bytes produced by ``serialize_params``; returns (kind, arrays)"""
    if len(blob) < _PREFIX.size:
        raise ContractError("parameter blob is truncated")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContractError(f"not a feddpg parameter file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported parameter format version {version}")
    offset = _PREFIX.size
    header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ContractError(f"parameter blob truncated inside tensor {entry['name']}")
        arrays[entry["name"]] = (
            np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        )
        offset = end
    if offset != len(blob):
        raise ContractError("trailing bytes after last tensor")
    return header["kind"], arrays


def serialized_size(params: ParamMapping, kind: str) -> int:
    return len(serialize_params(params, kind))


def params_digest(params: ParamMapping, kind: str) -> str:
    """SHA-256 of the canonical encoding"""
    return hashlib.sha256(serialize_params(params, kind)).hexdigest()


def save_params(path: Union[str, Path], params: ParamMapping, kind: str) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = serialize_params(params, kind)
    path.write_bytes(blob)
    logger.debug(f"Saved {kind} parameters ({len(blob)} bytes) to {path}")
    return len(blob)


def load_params(path: Union[str, Path]) -> Tuple[str, Dict[str, np.ndarray]]:
    return deserialize_params(Path(path).read_bytes())
