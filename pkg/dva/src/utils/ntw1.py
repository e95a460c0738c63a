"""
NTW1 weight-file codec.

Layout (little endian): magic ``NTW1``, u32 entry count, then per entry
u16 name length, UTF-8 name, u8 rank, u32 dims[rank], raw f32 data.
"""

import logging
import os
import struct
from collections import OrderedDict
from typing import Dict, Mapping, Tuple

import numpy as np

from dva.src.models.exceptions import DimensionError, MissingArtifactError, ParseError

# Initialize logger
logger = logging.getLogger(__name__)

MAGIC = b"NTW1"


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    """Encode named arrays (insertion order is preserved)"""
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, array in entries.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        array = np.asarray(array)
        if array.ndim > 0xFF:
            raise ValueError(f"rank {array.ndim} too large for entry {name}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes, source: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    """Decode an NTW1 blob into float32 arrays keyed by name"""
    view = memoryview(blob)
    offset = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise ParseError(f"truncated file while reading {what} at byte {offset}", path=source)
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ParseError("not an NTW1 file (bad magic)", path=source)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for index in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"name length of entry {index}"))
        try:
            name = bytes(take(name_len, f"name of entry {index}")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"entry {index} name is not UTF-8", path=source) from e
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        count_values = int(np.prod(dims)) if rank else 1
        raw = take(4 * count_values, f"data of {name}")
        if name in entries:
            raise ParseError(f"duplicate entry {name}", path=source)
        entries[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if offset != len(view):
        raise ParseError(f"{len(view) - offset} trailing bytes after last entry", path=source)
    return entries


def save(path: str, entries: Mapping[str, np.ndarray]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    blob = dumps(entries)
    with open(path, "wb") as f:
        f.write(blob)
    logger.debug(f"Wrote {len(entries)} entries ({len(blob)} bytes) to {path}")
    return path


def load(path: str) -> "OrderedDict[str, np.ndarray]":
    if not os.path.exists(path):
        raise MissingArtifactError(path)
    with open(path, "rb") as f:
        blob = f.read()
    return loads(blob, source=str(path))


def check_schema(entries: Mapping[str, np.ndarray], schema: Mapping[str, Tuple[int, ...]],
                 kind: str = "weights") -> None:
    """Raise DimensionError unless names and shapes match ``schema`` exactly"""
    missing = [n for n in schema if n not in entries]
    unexpected = [n for n in entries if n not in schema]
    if missing or unexpected:
        raise DimensionError(
            f"{kind} do not match the configured schema "
            f"(missing: {missing[:5]}{'...' if len(missing) > 5 else ''}, "
            f"unexpected: {unexpected[:5]}{'...' if len(unexpected) > 5 else ''})"
        )
    for name, shape in schema.items():
        if tuple(entries[name].shape) != tuple(shape):
            raise DimensionError(
                f"{kind} entry {name} has shape {tuple(entries[name].shape)}, expected {tuple(shape)}"
            )


def select(entries: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {name: array for name, array in entries.items() if name.startswith(prefix)}
