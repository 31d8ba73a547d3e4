"""Single-file, byte-stable checkpoint container.

Layout::

    b"FRNVCKPT" | u32 format version | u64 header length | header JSON | tensor bytes

The header is canonical JSON (sorted keys) describing an arbitrary nested
structure in which every tensor is replaced by a reference into the trailing
byte section.  Encoding the same state twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Any

import numpy as np
import torch

__all__ = ["MAGIC", "FORMAT_VERSION", "CheckpointFormatError", "encode", "decode", "write_atomic", "sha256_file"]

MAGIC = b"FRNVCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_TORCH_OF = {v: k for k, v in _DTYPES.items()}


class CheckpointFormatError(ValueError):
    pass


def _pack(obj: Any, blobs: list[bytes], tensors: list[dict]) -> Any:
    if isinstance(obj, torch.Tensor):
        t = obj.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointFormatError(f"unsupported tensor dtype {t.dtype}")
        raw = t.numpy().tobytes() if t.numel() else b""
        tensors.append({"dtype": _DTYPES[t.dtype], "shape": list(t.shape), "nbytes": len(raw)})
        blobs.append(raw)
        return {"__tensor__": len(tensors) - 1}
    if isinstance(obj, dict):
        return {"__dict__": [[_pack(k, blobs, tensors), _pack(v, blobs, tensors)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_pack(v, blobs, tensors) for v in obj]}
    if isinstance(obj, list):
        return [_pack(v, blobs, tensors) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise CheckpointFormatError(f"cannot serialize object of type {type(obj).__name__}")


def _unpack(obj: Any, tensors: list[torch.Tensor]) -> Any:
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__dict__" in obj:
            return {_unpack(k, tensors): _unpack(v, tensors) for k, v in obj["__dict__"]}
        if "__tuple__" in obj:
            return tuple(_unpack(v, tensors) for v in obj["__tuple__"])
        raise CheckpointFormatError(f"unexpected mapping in header: {sorted(obj)}")
    if isinstance(obj, list):
        return [_unpack(v, tensors) for v in obj]
    return obj


def encode(state: Any) -> bytes:
    blobs: list[bytes] = []
    tensors: list[dict] = []
    tree = _pack(state, blobs, tensors)
    header = json.dumps({"tree": tree, "tensors": tensors}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def decode(data: bytes) -> Any:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off : off + hlen])
    off += hlen
    tensors = []
    for meta in header["tensors"]:
        raw = data[off : off + meta["nbytes"]]
        off += meta["nbytes"]
        arr = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
        tensors.append(torch.from_numpy(arr))
    if off != len(data):
        raise CheckpointFormatError("trailing bytes after tensor section")
    return _unpack(header["tree"], tensors)


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
