"""Reader/writer for the shared tensor-archive format.

Independent implementation of the interchange boundary: an 8-byte
little-endian header length, a UTF-8 JSON header mapping tensor names to
{dtype, shape, data_offsets}, and a contiguous little-endian payload
(safetensors layout). Writes are deterministic: lexicographic name order,
contiguous offsets, no metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: too short for a header length prefix")
    (header_len,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    payload = blob[8 + header_len :]
    out: dict[str, np.ndarray] = {}
    for name, desc in header.items():
        if name == "__metadata__":
            continue
        begin, end = desc["data_offsets"]
        raw = payload[begin:end]
        dtype = desc["dtype"]
        if dtype == "F32":
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        elif dtype == "F16":
            arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
        elif dtype == "BF16":
            u16 = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
            arr = (u16 << 16).view(np.float32).astype(np.float32)
        else:
            raise ValueError(f"{name}: unsupported dtype {dtype}")
        out[name] = arr.reshape(tuple(desc["shape"]))
    return out


def save_tensors(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    header: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(struct.pack("<Q", len(blob)) + blob + b"".join(chunks))
    tmp.replace(path)
