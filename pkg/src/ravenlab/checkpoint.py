"""Named-tensor binary checkpoints.

Layout: 4-byte magic "DRNC", little-endian uint32 format version,
little-endian uint64 header length, UTF-8 JSON header, then a packed
little-endian float32 payload.  The header carries the tensor index
[{name, shape, byte_offset}], the training config echo, the step counter,
and small scalar extras.  Round-trips are bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DRNC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int
    extra: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, tensors: dict, config: dict, step: int, extra: dict | None = None) -> None:
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"tensors": index, "config": config, "step": int(step), "extra": extra or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"format version {version} unsupported (expected {VERSION})")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header_end = 16 + header_len
    if header_end > len(blob):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc

    payload = blob[header_end:]
    tensors = {}
    expected_end = 0
    for entry in header["tensors"]:
        shape = tuple(int(d) for d in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        start = int(entry["byte_offset"])
        if start != expected_end:
            raise CheckpointError(
                f"tensor {entry['name']!r}: offset {start} disagrees with running "
                f"payload position {expected_end}"
            )
        expected_end = start + nbytes
        if expected_end > len(payload):
            raise CheckpointError(
                f"tensor {entry['name']!r}: payload truncated "
                f"(needs {expected_end} bytes, have {len(payload)})"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    if expected_end != len(payload):
        raise CheckpointError(
            f"payload has {len(payload)} bytes but index accounts for {expected_end}"
        )
    return Checkpoint(
        tensors=tensors,
        config=header["config"],
        step=int(header["step"]),
        extra=header.get("extra", {}),
        version=version,
    )
