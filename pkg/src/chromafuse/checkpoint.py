"""Binary checkpoint container shared by the denoiser and the fusion head.

Layout: magic bytes "DIFZ", format version (u32 LE), entry count (u32 LE),
then per entry: name length (u32 LE), UTF-8 name, rank (u32 LE), one u32 LE
per dimension, and the raw float32 little-endian payload. Entries are
written in sorted name order so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DIFZ"
FORMAT_VERSION = 1


def save_entries(path: str | Path, entries: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> None:
    blobs = [struct.pack("<4sII", MAGIC, version, len(entries))]
    for name in sorted(entries):
        src = np.asarray(entries[name])
        # ascontiguousarray promotes 0-d to 1-d, so record the true shape
        arr = np.ascontiguousarray(src, dtype="<f4")
        encoded = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(encoded)))
        blobs.append(encoded)
        blobs.append(struct.pack("<I", src.ndim))
        blobs.append(struct.pack(f"<{src.ndim}I", *src.shape))
        blobs.append(arr.tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_entries(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ValueError(f"not a DIFZ checkpoint: {path}")
    version, count = struct.unpack_from("<II", raw, 4)
    offset = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(dims)
        offset += 4 * n
        if name in entries:
            raise ValueError(f"duplicate entry name {name!r} in {path}")
        entries[name] = arr.astype(np.float64)
    if offset != len(raw):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    return entries, version


def scalar_entry(value: float) -> np.ndarray:
    return np.asarray(float(value))
