"""Binary archive of named tensors.

Layout (all integers little-endian u32 unless noted)::

    magic b"DPTC" | version | count
    per tensor: name_len | name (utf-8) | rank | extents... | dtype tag (u8) | payload

Tag 0 is float32, tag 1 is uint8 (used for JSON metadata). Payload is little-endian,
row-major. Tensor order is preserved, so load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPTC"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_TAG_OF = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


class CheckpointError(ValueError):
    pass


def _tag(arr: np.ndarray) -> tuple[int, np.ndarray]:
    if arr.dtype == np.uint8:
        return 1, arr
    return 0, np.asarray(arr, dtype="<f4")


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        tag, a = _tag(np.asarray(arr))
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(struct.pack("<B", tag))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    mv = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise CheckpointError(f"truncated archive at byte {pos}")
        chunk = mv[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint archive (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _TAGS:
            raise CheckpointError(f"tensor {name}: unknown dtype tag {tag}")
        dt = _TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).copy()
    if pos != len(mv):
        raise CheckpointError(f"{len(mv) - pos} trailing bytes after {count} tensors")
    return tensors


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors))
    tmp.replace(path)
    return path


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def decode_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))
