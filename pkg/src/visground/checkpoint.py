"""``VLTVG1`` named-tensor container.

Layout (all integers little-endian uint32)::

    b"VLTVG1" | entry count | entries...
    entry := name length | UTF-8 name | dtype tag (1 byte) | rank | dims... | raw values

Dtype tags: ``f`` float32, ``d`` float64, ``B`` uint8. The model config travels
as a uint8 entry named ``meta.config`` holding UTF-8 JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VLTVG1"
CONFIG_ENTRY = "meta.config"
_TAGS = {np.dtype("<f4"): b"f", np.dtype("<f8"): b"d", np.dtype("u1"): b"B"}
_DTYPES = {v: k for k, v in _TAGS.items()}


def dumps(tensors: dict[str, np.ndarray], config: dict | None = None) -> bytes:
    entries = dict(tensors)
    if config is not None:
        entries[CONFIG_ENTRY] = np.frombuffer(json.dumps(config, sort_keys=True).encode(), dtype=np.uint8)
    out = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _TAGS:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + _TAGS[dt])
        out.append(struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if not buf.startswith(MAGIC):
        raise FormatError("not a VLTVG1 checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        tag = take(1)
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag!r} for {name}")
        dt = _DTYPES[tag]
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
    config = None
    if CONFIG_ENTRY in tensors:
        config = json.loads(tensors.pop(CONFIG_ENTRY).tobytes().decode("utf-8"))
    return tensors, config


def save(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(tensors, config))
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return loads(Path(path).read_bytes())
