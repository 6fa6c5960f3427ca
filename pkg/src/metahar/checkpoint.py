"""Binary parameter checkpoints.

Layout::

    b"MHCKPT01"                      8-byte magic
    uint32 little-endian             header length in bytes
    header                           UTF-8 JSON
    payload                          float32 little-endian, tensors back to back

The header lists every tensor as ``{"name", "shape", "offset", "kind"}`` where
``offset`` counts float32 elements from the start of the payload and ``kind``
is ``"param"`` or ``"buffer"``. It also carries ``config_digest``, the encoder
configuration and a textual description of the attention head merge.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .data import ParameterSet
from .encoder import HEAD_MERGE, EncoderConfig
from .errors import DataError

MAGIC = b"MHCKPT01"


def save_checkpoint(path, params, buffers=None, enc_cfg: EncoderConfig | None = None, config_digest: str = "",
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    items = [("param", k, v) for k, v in params.items()]
    items += [("buffer", k, v) for k, v in (buffers or {}).items()]
    for kind, name, tensor in items:
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "kind": kind})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "format": "metahar-checkpoint",
        "version": 1,
        "dtype": "float32-le",
        "config_digest": config_digest,
        "head_merge": HEAD_MERGE,
        "encoder": dataclasses.asdict(enc_cfg) if enc_cfg is not None else None,
        "tensors": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError("not a checkpoint file (bad magic)", path)
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path, dtype=torch.float32):
    """Return ``(params, buffers, header)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)", path)
    (n,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start: start + n].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f4", offset=start + n)
    params, buffers = {}, {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + size > payload.size:
            raise DataError(f"truncated payload for tensor {e['name']!r}", path)
        arr = payload[e["offset"]: e["offset"] + size].reshape(e["shape"])
        t = torch.as_tensor(arr.copy()).to(dtype)
        (params if e["kind"] == "param" else buffers)[e["name"]] = t
    return ParameterSet(params), buffers, header
