# core/checkpoint.py
"""
Single-file checkpoint container.

    <UTF-8 JSON header>\n<little-endian float32 payload>

The header is {format_version, arrays: [{name, shape, dtype, byte_offset}],
config, epoch, metrics}, serialised with sorted keys and compact separators so
that save -> load -> save reproduces the file byte for byte.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

from core.errors import DataError, FormatError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4")}


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    epoch: int = 0
    metrics: Dict[str, Any] = field(default_factory=dict)

    def has(self, name: str) -> bool:
        return name in self.arrays


def encode_checkpoint(c: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in c.arrays.items():
        data = np.ascontiguousarray(value, dtype=DTYPES["f32"]).tobytes()
        entries.append({"name": name, "shape": [int(s) for s in np.shape(value)],
                        "dtype": "f32", "byte_offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "arrays": entries,
        "config": c.config,
        "epoch": int(c.epoch),
        "metrics": c.metrics,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return text.encode("utf-8") + b"\n" + b"".join(chunks)


def _require(header: Dict, key: str):
    if key not in header:
        raise FormatError(key, "missing from header")
    return header[key]


def decode_checkpoint(data: bytes) -> Checkpoint:
    cut = data.find(b"\n")
    if cut < 0:
        raise FormatError("header", "no newline terminating the JSON header")
    try:
        header = json.loads(data[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("header", f"not valid UTF-8 JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError("header", "must be a JSON object")

    version = _require(header, "format_version")
    if version != FORMAT_VERSION:
        raise FormatError("format_version", f"expected {FORMAT_VERSION}, found {version}")
    payload = memoryview(data)[cut + 1:]

    arrays: Dict[str, np.ndarray] = {}
    expected = 0
    entries = _require(header, "arrays")
    if not isinstance(entries, list):
        raise FormatError("arrays", f"must be a list, found {type(entries).__name__}")
    for i, entry in enumerate(entries):
        where = f"arrays[{i}]"
        if not isinstance(entry, dict):
            raise FormatError(where, f"must be an object, found {type(entry).__name__}")
        for key in ("name", "shape", "dtype", "byte_offset"):
            if key not in entry:
                raise FormatError(f"{where}.{key}", "missing")
        if not isinstance(entry["name"], str):
            raise FormatError(f"{where}.name", f"must be a string, found {entry['name']!r}")
        if not isinstance(entry["dtype"], str) or entry["dtype"] not in DTYPES:
            raise FormatError(f"{where}.dtype", f"unknown dtype '{entry['dtype']}'")
        shape = entry["shape"]
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise FormatError(f"{where}.shape", f"invalid shape {shape}")
        if entry["byte_offset"] != expected:
            raise FormatError(f"{where}.byte_offset",
                              f"expected {expected}, found {entry['byte_offset']}")
        dtype = DTYPES[entry["dtype"]]
        span = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected + span > len(payload):
            raise FormatError(where, f"payload truncated: '{entry['name']}' needs bytes "
                                     f"{expected}..{expected + span}, payload has {len(payload)}")
        flat = np.frombuffer(payload, dtype=dtype, count=span // dtype.itemsize, offset=expected)
        arrays[entry["name"]] = flat.reshape(shape).astype(np.float32)
        expected += span
    if expected != len(payload):
        raise FormatError("payload", f"header declares {expected} bytes, payload has {len(payload)}")

    return Checkpoint(arrays, _require(header, "config"), _require(header, "epoch"),
                      _require(header, "metrics"))


def save_checkpoint(c: Checkpoint, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(c))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("Saved checkpoint %s (epoch %d, %d arrays)", path, c.epoch, len(c.arrays))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
