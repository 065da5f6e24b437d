"""Versioned binary checkpoint container.

Layout: magic "SDRL", format version (u32 LE), encoder-config digest
(32 raw sha256 bytes), record count (u32), then per record a name
(u16 length + utf-8), shape (u8 rank + u32 extents), and raw float32
little-endian data. Records cover parameters and BN running statistics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointCorrupt, CheckpointIncompatible

MAGIC = b"SDRL"
FORMAT_VERSION = 1


def config_digest(enc_cfg) -> bytes:
    """sha256 over the canonical JSON encoding of an EncoderConfig."""
    doc = {
        "in_channels": enc_cfg.in_channels,
        "stage_channels": list(enc_cfg.stage_channels),
        "blocks_per_stage": enc_cfg.blocks_per_stage,
        "output_upsample_factor": enc_cfg.output_upsample_factor,
        "out_channels": enc_cfg.out_channels,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()


def save(path, state: Dict[str, np.ndarray], enc_cfg) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(config_digest(enc_cfg))
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointCorrupt(f"truncated checkpoint while reading {what}")
    return buf


def load(path, enc_cfg=None) -> Tuple[Dict[str, np.ndarray], bytes]:
    """Read a checkpoint; verify the digest against enc_cfg when given."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointCorrupt(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointIncompatible(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        digest = _read_exact(fh, 32, "digest")
        if enc_cfg is not None and digest != config_digest(enc_cfg):
            raise CheckpointIncompatible(
                f"{path}: checkpoint encoder config does not match the requested model")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        state: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "extent"))[0] for _ in range(rank)
            )
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
            raw = _read_exact(fh, n_bytes, f"data for {name}")
            state[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointCorrupt(f"{path}: trailing bytes after last record")
    return state, digest


def encoder_state(state: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Filter a checkpoint down to the shared-encoder records."""
    return {k: v for k, v in state.items() if k.startswith("encoder.")}
