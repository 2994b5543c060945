"""Versioned checkpoint container.

File layout (all integers little-endian):

    bytes 0..7     magic ``b"DTLRCKPT"``
    bytes 8..11    uint32 format version (currently 1)
    bytes 12..19   uint64 length of the JSON header in bytes
    header         UTF-8 JSON:
                     {"config": {...}, "alphabet": [symbols...],
                      "step": int, "extra": {...},
                      "tensors": [{"name", "dtype", "shape", "offset"}...]}
    payload        concatenated raw tensor bytes, C order, little-endian,
                   at the offsets given in the header

Model parameters are float32 (``<f4``); ``<f8``, ``<i8`` and ``|u1`` are
also accepted so optimizer state and RNG blobs can ride along. Loading a
checkpoint and rebuilding the model reproduces forward outputs bit for bit
on the same platform.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DTLRCKPT"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "|u1"}


@dataclass
class Checkpoint:
    """Model state: config, named parameter blobs, alphabet, step counter."""

    config: "ModelConfig"
    alphabet_symbols: list[str]
    step: int
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _normalize(arr: np.ndarray) -> tuple[np.ndarray, str]:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        return arr, "<f4"
    if arr.dtype == np.float64:
        return arr, "<f8"
    if arr.dtype == np.int64:
        return arr, "<i8"
    if arr.dtype == np.uint8:
        return arr, "|u1"
    raise TypeError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr, dtype = _normalize(ckpt.tensors[name])
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype,
                        "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "alphabet": list(ckpt.alphabet_symbols),
        "step": ckpt.step,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str) -> Checkpoint:
    from .model import ModelConfig

    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        version, = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len, = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()

    tensors = {}
    for entry in header["tensors"]:
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise ValueError(f"bad dtype in checkpoint: {entry['dtype']}")
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()

    cfg_dict = dict(header["config"])
    for key in ("backbone_channels",):
        if key in cfg_dict and isinstance(cfg_dict[key], list):
            cfg_dict[key] = tuple(cfg_dict[key])
    config = ModelConfig(**cfg_dict)
    return Checkpoint(config=config, alphabet_symbols=list(header["alphabet"]),
                      step=int(header["step"]), tensors=tensors,
                      extra=header.get("extra", {}), version=version)
