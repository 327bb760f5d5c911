"""Versioned binary checkpoints with an integrity trailer.

Layout: 8-byte magic, u32 header length, UTF-8 JSON header (metadata plus a
parameter manifest of name/shape/dtype triples), raw little-endian tensor
blobs in manifest order, and a SHA-256 digest over everything preceding it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

_DTYPES = {
    "f4": torch.float32,
    "f8": torch.float64,
    "i8": torch.int64,
    "b1": torch.bool,
}
_NUMPY_CODES = {
    torch.float32: "f4",
    torch.float64: "f8",
    torch.int64: "i8",
    torch.bool: "b1",
}


def save(path: str | Path, magic: bytes, meta: dict, state_dict: dict) -> None:
    if len(magic) != 8:
        raise CheckpointError("magic must be 8 bytes")
    manifest = []
    blobs = []
    for name, tensor in state_dict.items():
        tensor = tensor.detach().cpu()
        code = _NUMPY_CODES.get(tensor.dtype)
        if code is None:
            raise CheckpointError(f"unsupported tensor dtype {tensor.dtype} for {name}")
        manifest.append({"name": name, "shape": list(tensor.shape), "dtype": code})
        blobs.append(tensor.numpy().astype("<" + code).tobytes())
    header = json.dumps({"meta": meta, "params": manifest}).encode("utf-8")
    body = magic + struct.pack("<I", len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def load(path: str | Path, magic: bytes) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 44:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checkpoint hash mismatch")
    if body[:8] != magic:
        raise CheckpointError(
            f"{path}: wrong checkpoint type (expected magic {magic!r}, got {body[:8]!r})"
        )
    (header_len,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12 : 12 + header_len].decode("utf-8"))
    state = {}
    offset = 12 + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        code = entry["dtype"]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(code).itemsize
        arr = np.frombuffer(body[offset : offset + nbytes], dtype="<" + code).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(_DTYPES[code])
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: blob size mismatch")
    return header["meta"], state


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
