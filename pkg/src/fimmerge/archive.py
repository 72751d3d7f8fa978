"""Checkpoint tensor archives: a named map of dense f32 tensors on disk.

File layout (compatible with the common safetensors layout):

    [8-byte little-endian unsigned header length n]
    [n bytes of UTF-8 JSON: {name: {"dtype", "shape", "data_offsets"}, ...}]
    [contiguous raw tensor payload, little-endian]

``data_offsets`` are ``[begin, end)`` byte positions relative to the start
of the payload. Writes are deterministic: names are serialized in
lexicographic order, offsets are assigned contiguously in that order, and
no timestamps or environment data are embedded, so identical archives
produce byte-identical files.

Only f32 payloads are written. f16 and bf16 tensors are upcast to f32 on
load (lossless) and the conversion is recorded in ``TensorArchive.notes``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_SUPPORTED_DTYPES = ("F32", "F16", "BF16")


class ArchiveError(ValueError):
    """Malformed archive file or invalid archive contents."""


@dataclass
class TensorArchive:
    """Ordered map of parameter name -> float32 ndarray.

    Entries are kept sorted lexicographically by name, so iteration order is
    deterministic. All values must be finite.
    """

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        normalized: dict[str, np.ndarray] = {}
        for name in sorted(self.entries):
            arr = np.ascontiguousarray(self.entries[name], dtype=np.float32)
            normalized[name] = arr
        self.entries = normalized

    def names(self) -> list[str]:
        return list(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def items(self):
        return self.entries.items()

    def num_elements(self) -> int:
        return sum(a.size for a in self.entries.values())

    def validate(self) -> None:
        for name, arr in self.entries.items():
            if arr.dtype != np.float32:
                raise ArchiveError(f"tensor {name!r} is not f32")
            if not np.all(np.isfinite(arr)):
                raise ArchiveError(f"tensor {name!r} contains non-finite values")

    def allclose(self, other: TensorArchive, rtol: float = 0.0, atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.allclose(self.entries[n], other.entries[n], rtol=rtol, atol=atol)
            for n in self.entries
        )


def _decode_payload(dtype: str, raw: bytes, shape: tuple[int, ...], name: str) -> np.ndarray:
    if dtype == "F32":
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    elif dtype == "F16":
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    elif dtype == "BF16":
        # numpy has no bf16: widen the 16-bit pattern into the top half of u32
        u16 = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
        arr = (u16 << 16).view(np.float32).astype(np.float32)
    else:
        raise ArchiveError(f"tensor {name!r}: unsupported dtype {dtype!r}")
    try:
        return arr.reshape(shape)
    except ValueError as exc:
        raise ArchiveError(f"tensor {name!r}: payload does not match shape {shape}") from exc


def _dtype_itemsize(dtype: str) -> int:
    return 4 if dtype == "F32" else 2


def _parse_header(blob: bytes) -> dict:
    def reject_duplicates(pairs):
        seen = set()
        out = {}
        for key, value in pairs:
            if key in seen:
                raise ArchiveError(f"duplicate name in header: {key!r}")
            seen.add(key)
            out[key] = value
        return out

    try:
        header = json.loads(blob.decode("utf-8"), object_pairs_hook=reject_duplicates)
    except ArchiveError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise ArchiveError("header is not a JSON object")
    return header


def load_archive(path: str | Path) -> TensorArchive:
    """Load and validate a tensor archive file.

    Rejects malformed headers, out-of-bounds or overlapping byte ranges,
    shape/byte-length mismatches, duplicate names, and non-finite values.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise ArchiveError(f"{path}: file too short for header length prefix")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise ArchiveError(f"{path}: declared header length {header_len} exceeds file size")
    header = _parse_header(blob[8 : 8 + header_len])
    payload = blob[8 + header_len :]

    notes: list[str] = []
    spans: list[tuple[int, int, str]] = []
    entries: dict[str, np.ndarray] = {}
    for name, desc in header.items():
        if name == "__metadata__":
            continue
        if not isinstance(desc, dict):
            raise ArchiveError(f"tensor {name!r}: header entry is not an object")
        try:
            dtype = desc["dtype"]
            shape = tuple(int(d) for d in desc["shape"])
            begin, end = (int(x) for x in desc["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"tensor {name!r}: malformed header entry") from exc
        if dtype not in _SUPPORTED_DTYPES:
            raise ArchiveError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if any(d < 1 for d in shape):
            raise ArchiveError(f"tensor {name!r}: non-positive dimension in shape {shape}")
        if not (0 <= begin <= end <= len(payload)):
            raise ArchiveError(f"tensor {name!r}: byte range [{begin}, {end}) out of bounds")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - begin != count * _dtype_itemsize(dtype):
            raise ArchiveError(
                f"tensor {name!r}: byte range length {end - begin} does not match "
                f"shape {shape} ({count} x {_dtype_itemsize(dtype)} bytes)"
            )
        spans.append((begin, end, name))
        entries[name] = _decode_payload(dtype, payload[begin:end], shape, name)
        if dtype != "F32":
            notes.append(f"{name}: converted {dtype} -> F32 on load")

    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin < cursor:
            raise ArchiveError(f"tensor {name!r}: byte range overlaps a previous tensor")
        if begin > cursor:
            raise ArchiveError(f"payload gap before tensor {name!r} (ranges must be contiguous)")
        cursor = end
    if cursor != len(payload):
        raise ArchiveError(f"{path}: {len(payload) - cursor} trailing payload bytes not covered by header")

    for name, arr in entries.items():
        if not np.all(np.isfinite(arr)):
            raise ArchiveError(f"tensor {name!r}: non-finite values")

    return TensorArchive(entries=entries, notes=notes)


def archive_to_bytes(archive: TensorArchive) -> bytes:
    """Serialize to the on-disk representation (deterministic bytes)."""
    archive.validate()
    header: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in archive.names():
        arr = archive.entries[name]
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(chunks)


def write_archive(archive: TensorArchive, path: str | Path) -> None:
    """Write the archive atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(archive_to_bytes(archive))
    tmp.replace(path)


def archive_digest(archive: TensorArchive) -> str:
    """SHA-256 of the canonical serialized bytes."""
    import hashlib

    return hashlib.sha256(archive_to_bytes(archive)).hexdigest()
