"""Flat binary tensor dumps for debugging.

Format: one uint64 little-endian element count, then that many
little-endian float32 values. Shape is intentionally not stored; these
are scratch dumps for diffing runs, not checkpoints.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError


def dump_tensor(path: str | Path, values: np.ndarray) -> None:
    flat = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ConfigError(f"truncated tensor dump: {path}")
    (count,) = struct.unpack_from("<Q", raw)
    body = raw[8:]
    if len(body) != 4 * count:
        raise ConfigError(
            f"tensor dump {path} declares {count} floats but holds {len(body)} bytes"
        )
    return np.frombuffer(body, dtype="<f4").astype(np.float32)
