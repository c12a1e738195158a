"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic    4 bytes  b"GACK"
    version  u16      1
    hlen     u32      length of the JSON header in bytes
    header   hlen     UTF-8 JSON: {"config": {...}, "vocab": [...],
                                   "meta": {...}, "tensors": [
                                       {"name", "shape", "offset", "count"}, ...]}
    payload  ...      tensors back to back as float64 little-endian,
                      row-major; ``offset`` is relative to payload start
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import Vocab
from .model import ModelConfig, Translator

MAGIC = b"GACK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Translator, vocab: Vocab | None = None, meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, value in model.state_dict().items():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "count": int(value.size)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": asdict(model.config),
        "vocab": list(vocab.itos) if vocab is not None else None,
        "meta": meta or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
    payload = memoryview(raw)[start:]
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + 8 * e["count"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(payload[e["offset"] : end], dtype="<f8").reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float64)
    return header, tensors


def load_checkpoint(path) -> tuple[Translator, Vocab | None, dict]:
    header, tensors = read_checkpoint(path)
    model = Translator(ModelConfig(**header["config"]))
    model.load_state_dict(tensors)
    model.eval()
    vocab = Vocab(header["vocab"]) if header.get("vocab") else None
    return model, vocab, header.get("meta", {})
