"""
Hashing, checkpoint and config utilities for gaze-diffusion.
Provides content hashes, the manifest + blob checkpoint format and
strict dataclass (de)serialisation.
"""

import hashlib
import json
import os
from dataclasses import dataclass, asdict, fields
from typing import Any, Dict, List, Tuple, Type, TypeVar

import numpy as np

from errors import DataError


MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
BLOB_DTYPE = np.dtype("<f4")  # little-endian float32

T = TypeVar("T")


@dataclass
class TensorEntry:
    """Location of one tensor inside the checkpoint blob."""
    name: str
    shape: List[int]
    offset: int  # bytes from start of blob


def hash_data(data: Any) -> str:
    """Hash arbitrary data (converts to JSON first)."""
    if isinstance(data, (str, bytes)):
        content = data.encode() if isinstance(data, str) else data
    else:
        content = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(content).hexdigest()


def params_checksum(params: Dict[str, np.ndarray]) -> str:
    """Deterministic checksum over a parameter dict (names, shapes, dtypes, bytes)."""
    digest = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        digest.update(f"{name}|{arr.shape}|{arr.dtype.str}|".encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def dataclass_from_dict(cls: Type[T], data: Dict[str, Any]) -> T:
    """Build a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise DataError(f"{cls.__name__}: expected a JSON object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise DataError(f"{cls.__name__}: unknown keys {unknown}")
    return cls(**data)


def dataclass_to_json(obj: Any) -> str:
    return json.dumps(asdict(obj), sort_keys=True, indent=2)


def save_checkpoint(path: str, tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> str:
    """
    Write tensors and metadata as a checkpoint directory.

    Layout: <path>/manifest.json (JSON text) and <path>/weights.bin
    (little-endian float32, tensors concatenated in sorted name order).
    Returns the blob hash.
    """
    os.makedirs(path, exist_ok=True)

    entries: List[TensorEntry] = []
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=BLOB_DTYPE)
        raw = arr.tobytes()
        entries.append(TensorEntry(name=name, shape=list(arr.shape), offset=offset))
        chunks.append(raw)
        offset += len(raw)

    blob = b"".join(chunks)
    blob_hash = hash_data(blob)

    manifest = {
        "format": "gaze-diffusion-checkpoint/1",
        "dtype": "float32-le",
        "blob": BLOB_NAME,
        "blob_sha256": blob_hash,
        "tensors": [asdict(e) for e in entries],
        "meta": meta,
    }

    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        f.write(blob)
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")

    return blob_hash


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a checkpoint directory written by save_checkpoint. Verifies the blob hash."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DataError(f"Not a checkpoint (missing {MANIFEST_NAME}): {path}")

    with open(manifest_path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"Corrupt checkpoint manifest {manifest_path}: {e}") from e

    with open(os.path.join(path, manifest.get("blob", BLOB_NAME)), "rb") as f:
        blob = f.read()

    if hash_data(blob) != manifest.get("blob_sha256"):
        raise DataError(f"Checkpoint blob hash mismatch in {path}")

    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * BLOB_DTYPE.itemsize
        if stop > len(blob):
            raise DataError(f"Tensor {entry['name']} overruns the blob in {path}")
        arr = np.frombuffer(blob[start:stop], dtype=BLOB_DTYPE).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)

    return tensors, manifest.get("meta", {})
