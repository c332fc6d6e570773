"""
components.containers
Self-describing binary container used for datasets and parameter checkpoints.

Layout:
    line 1   magic + format version
    line 2   JSON manifest (sorted keys): {"meta": {...}, "blocks": {name: {dtype, shape, offset, nbytes}}}
    rest     raw little-endian blocks (float32 "<f4" or int32 "<i4") at the manifest offsets

Writing the same blocks and meta always produces the same bytes.

Usage:
    write_container("model.ckpt", {"fusion.weight": w}, meta={"seed": 7})
    blocks, meta = read_container("model.ckpt")
"""
from __future__ import annotations

import json
import logging
import os
from typing import Any, Dict, Mapping, Tuple

import numpy as np

__all__ = ["ContainerError", "write_container", "read_container", "MAGIC"]

logger = logging.getLogger(__name__)

MAGIC = b"SERVOPACK 1\n"
_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


class ContainerError(ValueError):
    """Malformed or unreadable container file."""


def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _block_dtype(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        if arr.size and (arr.min() < np.iinfo(np.int32).min or arr.max() > np.iinfo(np.int32).max):
            raise ContainerError("integer block does not fit in int32")
        return "<i4"
    if np.issubdtype(arr.dtype, np.floating):
        return "<f4"
    raise ContainerError(f"unsupported block dtype {arr.dtype}")


def encode_container(blocks: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    entries: Dict[str, Dict[str, Any]] = {}
    payload = []
    offset = 0
    for name in sorted(blocks):
        arr = np.asarray(blocks[name])
        code = _block_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        payload.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": dict(meta), "blocks": entries}, sort_keys=True,
                          separators=(",", ":"), default=_json_default, allow_nan=False)
    return MAGIC + manifest.encode("utf-8") + b"\n" + b"".join(payload)


def write_container(path, blocks: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    data = encode_container(blocks, meta)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug("wrote container %s (%d blocks, %d bytes)", path, len(blocks), len(data))


def decode_container(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not data.startswith(MAGIC):
        raise ContainerError("bad magic: not a servo container")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise ContainerError("truncated manifest")
    try:
        manifest = json.loads(data[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"unreadable manifest: {e}") from e
    body = memoryview(data)[end + 1:]
    blocks: Dict[str, np.ndarray] = {}
    for name, entry in manifest.get("blocks", {}).items():
        code = entry.get("dtype")
        if code not in _DTYPES:
            raise ContainerError(f"block {name!r} has unsupported dtype {code!r}")
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if start < 0 or start + nbytes > len(body):
            raise ContainerError(f"block {name!r} runs past the end of the file")
        shape = tuple(int(s) for s in entry["shape"])
        arr = np.frombuffer(body[start:start + nbytes], dtype=_DTYPES[code])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"block {name!r} size does not match its shape {shape}")
        blocks[name] = arr.reshape(shape).copy()
    return blocks, manifest.get("meta", {})


def read_container(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    return decode_container(data)
