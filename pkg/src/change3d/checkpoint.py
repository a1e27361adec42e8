"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"CH3D"
    version u16      currently 1
    hash    32 bytes sha256 of the canonical config text
    config  u32 length + utf-8 text (so a checkpoint is self-describing)
    iter    u64      training iteration counter
    tensor table     model parameters and buffers
    tensor table     optimizer state

Each table is a u32 entry count followed by entries of
    name u16 length + utf-8 | dtype u8 | ndim u8 | extents u32 each | raw payload.

Payload bytes are the array's little-endian memory, so a save/load round trip
is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CH3D"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                np.dtype(np.int64): 2}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    config_hash: bytes
    iteration: int
    tensors: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray]


def _write_table(out: bytearray, table: dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(table))
    for name, arr in table.items():
        arr = np.ascontiguousarray(arr)
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        enc = name.encode("utf-8")
        out += struct.pack("<H", len(enc))
        out += enc
        out += struct.pack("<BB", code, arr.ndim)
        for ext in arr.shape:
            out += struct.pack("<I", ext)
        out += arr.astype(_DTYPES[code], copy=False).tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_table(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    table = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = tuple(r.unpack("<I")[0] for _ in range(ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        if ndim == 0:
            arr = np.frombuffer(r.take(dt.itemsize), dtype=dt)[0]
            table[name] = np.asarray(arr)
        else:
            arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape)
            table[name] = arr.copy()
    return table


def save_checkpoint(path: str, config_text: str, config_hash: bytes,
                    iteration: int, tensors: dict[str, np.ndarray],
                    opt_state: dict[str, np.ndarray]) -> None:
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += config_hash
    enc = config_text.encode("utf-8")
    out += struct.pack("<I", len(enc))
    out += enc
    out += struct.pack("<Q", iteration)
    _write_table(out, tensors)
    _write_table(out, opt_state)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(out))
    import os
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config_hash = r.take(32)
    (clen,) = r.unpack("<I")
    config_text = r.take(clen).decode("utf-8")
    (iteration,) = r.unpack("<Q")
    tensors = _read_table(r)
    opt_state = _read_table(r)
    return Checkpoint(config_text=config_text, config_hash=config_hash,
                      iteration=int(iteration), tensors=tensors,
                      opt_state=opt_state)
