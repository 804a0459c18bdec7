"""Checkpoint files.

Layout: 8-byte little-endian header length, a UTF-8 JSON header, then the
float64 little-endian payload of every tensor in header order. The header
maps each parameter name to ``{"shape", "offset", "count"}`` (offset in
bytes from the start of the payload) and carries free-form string metadata
under the reserved ``"__metadata__"`` key.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .params import ParameterStore

METADATA_KEY = "__metadata__"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Raised for corrupt or truncated checkpoint files."""


def serialize(params: Mapping[str, torch.Tensor], metadata: Mapping[str, str] | None = None) -> bytes:
    header: dict = {METADATA_KEY: {str(k): str(v) for k, v in (metadata or {}).items()}}
    chunks = []
    offset = 0
    for name, t in params.items():
        if name == METADATA_KEY:
            raise ValueError(f"{METADATA_KEY!r} is reserved")
        arr = np.array(t.detach().cpu().numpy(), dtype="<f8", order="C")  # keeps 0-d shapes
        header[name] = {"shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(head)) + head + b"".join(chunks)


def deserialize(blob: bytes) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    if len(blob) < _LEN.size:
        raise CheckpointError("file shorter than the header-length field")
    (hlen,) = _LEN.unpack_from(blob)
    if hlen > len(blob) - _LEN.size:
        raise CheckpointError(f"header length {hlen} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[_LEN.size:_LEN.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    if not isinstance(header, dict):
        raise CheckpointError("header is not a JSON object")
    metadata = header.pop(METADATA_KEY, {})
    payload = memoryview(blob)[_LEN.size + hlen:]

    expected = 0
    out: dict[str, torch.Tensor] = {}
    for name, entry in header.items():
        try:
            shape, offset, count = tuple(entry["shape"]), int(entry["offset"]), int(entry["count"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"malformed header entry for {name!r}") from None
        if int(np.prod(shape, dtype=np.int64)) != count or offset != expected:
            raise CheckpointError(f"inconsistent header entry for {name!r}")
        expected += 8 * count
        if expected > len(payload):
            raise CheckpointError(f"payload truncated inside {name!r}")
        arr = np.frombuffer(payload[offset:expected], dtype="<f8").reshape(shape)
        out[name] = torch.from_numpy(arr.astype(np.float64))
    if expected != len(payload):
        raise CheckpointError(f"payload size {len(payload)} does not match header ({expected} bytes)")
    return out, dict(metadata)


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, torch.Tensor],
                    metadata: Mapping[str, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize(params, metadata))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    return deserialize(Path(path).read_bytes())


def load_into(store: ParameterStore, path: str | os.PathLike, prefix: str = "", strict: bool = True) -> dict[str, str]:
    """Load tensors named ``prefix + name`` from ``path`` into ``store``."""
    values, meta = load_checkpoint(path)
    if prefix:
        values = {n[len(prefix):]: t for n, t in values.items() if n.startswith(prefix)}
    store.load(values, strict=strict)
    return meta
