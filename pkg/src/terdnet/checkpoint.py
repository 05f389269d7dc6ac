"""Parameter checkpoints.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header
``{"params": [{"name", "shape", "offset"}, ...]}`` and then the parameters as
contiguous little-endian float32, offsets counted from the payload start.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Module


def encode_checkpoint(state: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {"params": entries}
    if meta:
        header["meta"] = meta
    raw = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<Q", len(raw)) + raw + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise ValueError("checkpoint is truncated")
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + n].decode())
    payload = memoryview(blob)[8 + n:]
    state = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return state, header


def save_checkpoint(path: str | Path, model: Module, meta: dict | None = None) -> None:
    state = dict(model.named_parameters())
    Path(path).write_bytes(encode_checkpoint({k: p.data for k, p in state.items()}, meta))


def load_checkpoint(path: str | Path, model: Module) -> dict:
    state, header = decode_checkpoint(Path(path).read_bytes())
    model.load_state_dict(state)
    return header


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode())


class CheckpointMismatch(ValueError):
    pass


def load_model(path: str | Path, config):
    """Build a model for ``config`` and fill it from the checkpoint at ``path``.

    Raises CheckpointMismatch when the checkpoint was written for a different
    architecture.
    """
    from .model import TERDNet

    header = read_header(path)
    saved = header.get("meta", {}).get("signature")
    expected = config.model_signature()
    if saved is not None and saved != expected:
        diff = sorted(k for k in set(saved) | set(expected) if saved.get(k) != expected.get(k))
        raise CheckpointMismatch(f"checkpoint was trained with different settings for: {', '.join(diff)}")
    model = TERDNet(config)
    try:
        load_checkpoint(path, model)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"checkpoint does not fit the configured model: {exc}") from exc
    return model
