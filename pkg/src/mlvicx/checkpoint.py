"""Binary checkpoint format for exact save/resume.

Layout (all integers little-endian):

    magic 'MLVX' | u8 version | u32 record count
    per record: u16 name length | UTF-8 name | u8 rank | u32 dim per axis
                | float32 LE payload

Model parameters and buffers, optimizer state, counters, the seed, and
the config hash are all stored as named records, so the format stays a
flat list of arrays. The seed is split into two 16-bit halves and the
hash into byte values because every payload is float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPE

MAGIC = b"MLVX"
VERSION = 1


class CheckpointError(Exception):
    """Malformed checkpoint; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    """Named arrays plus training counters for exact resume."""

    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    config_hash: str = ""
    version: int = VERSION


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    name_bytes = name.encode("utf-8")
    header = struct.pack("<H", len(name_bytes)) + name_bytes + struct.pack("<B", arr.ndim)
    header += b"".join(struct.pack("<I", d) for d in arr.shape)
    return header + arr.astype("<f4").tobytes()


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    records: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        records[f"param.{name}"] = arr
    records.update(ckpt.opt_state)
    records["meta.epoch"] = np.asarray([ckpt.epoch], dtype=DTYPE)
    records["meta.seed"] = np.asarray([ckpt.seed >> 16, ckpt.seed & 0xFFFF], dtype=DTYPE)
    hash_bytes = bytes.fromhex(ckpt.config_hash) if ckpt.config_hash else b""
    records["meta.config_hash"] = np.asarray(list(hash_bytes), dtype=DTYPE)

    blob = MAGIC + struct.pack("<B", ckpt.version) + struct.pack("<I", len(records))
    for name in sorted(records):
        blob += _encode_record(name, records[name])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def load_checkpoint(path: Path | str) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < 9:
        raise CheckpointError("truncated header", len(raw))
    version = raw[4]
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {VERSION}", 4)
    (count,) = struct.unpack_from("<I", raw, 5)
    pos = 9
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(raw):
            raise CheckpointError("truncated record header", pos)
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + name_len + 1 > len(raw):
            raise CheckpointError("truncated record name", pos)
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = raw[pos]
        pos += 1
        if rank > 4:
            raise CheckpointError(f"record {name!r} has rank {rank} > 4", pos - 1)
        if pos + 4 * rank > len(raw):
            raise CheckpointError(f"truncated dims for record {name!r}", pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        n_values = int(np.prod(dims)) if rank else 1
        nbytes = 4 * n_values
        if pos + nbytes > len(raw):
            raise CheckpointError(f"truncated payload for record {name!r}", pos)
        arr = np.frombuffer(raw, dtype="<f4", count=n_values, offset=pos).reshape(dims)
        records[name] = arr.astype(DTYPE).copy()
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last record", pos)

    params = {name[len("param."):]: arr for name, arr in records.items()
              if name.startswith("param.")}
    opt_state = {name: arr for name, arr in records.items() if name.startswith("opt.")}
    epoch = int(records.get("meta.epoch", np.zeros(1))[0])
    seed_rec = records.get("meta.seed", np.zeros(2))
    seed = (int(seed_rec[0]) << 16) | int(seed_rec[1])
    hash_rec = records.get("meta.config_hash", np.zeros(0))
    config_hash = bytes(int(b) for b in hash_rec).hex()
    return Checkpoint(params=params, opt_state=opt_state, epoch=epoch, seed=seed,
                      config_hash=config_hash, version=version)
