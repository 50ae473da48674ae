"""Versioned binary checkpoints.

Layout (little endian): b"GSRF", u32 version, u32 header length, JSON header,
u32 array count, then per array: u16 name length, name, u8 dtype length, dtype str,
u8 ndim, ndim x u64 dims, u64 byte count, raw bytes; finally a u32 CRC32 of
everything before it.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .surfel import SurfelSet

MAGIC = b"GSRF"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    surfels: SurfelSet
    optimizer: dict = field(default_factory=dict)  # name -> array
    iteration: int = 0
    seed: int = 0
    extras: dict = field(default_factory=dict)  # name -> array (training statistics)


def _pack_array(name, arr):
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    arr = arr.astype(dt, copy=False)
    nb = name.encode()
    ds = dt.str.encode()
    out = [struct.pack("<H", len(nb)), nb, struct.pack("<B", len(ds)), ds,
           struct.pack("<B", arr.ndim)]
    out += [struct.pack("<Q", d) for d in arr.shape]
    raw = arr.tobytes()
    out += [struct.pack("<Q", len(raw)), raw]
    return b"".join(out)


def save_checkpoint(path, ckpt):
    header = json.dumps(
        {"config": ckpt.config, "iteration": int(ckpt.iteration), "seed": int(ckpt.seed)},
        sort_keys=True,
    ).encode()
    arrays = [("surfels/" + k, v) for k, v in ckpt.surfels.arrays().items()]
    arrays += [("optimizer/" + k, ckpt.optimizer[k]) for k in sorted(ckpt.optimizer)]
    arrays += [("extras/" + k, ckpt.extras[k]) for k in sorted(ckpt.extras)]
    body = [MAGIC, struct.pack("<II", VERSION, len(header)), header,
            struct.pack("<I", len(arrays))]
    body += [_pack_array(n, a) for n, a in arrays]
    blob = b"".join(body)
    with open(path, "wb") as f:
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.blob):
            raise CheckpointTruncatedError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {data[:4]!r}, not a checkpoint")
    if len(data) < 16:
        raise CheckpointTruncatedError(f"{path}: checkpoint truncated")
    r = _Reader(data[:-4])
    r.take(4)
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")
    try:
        header = json.loads(r.take(hlen).decode())
        (count,) = r.unpack("<I")
        arrays = {}
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode()
            (dlen,) = r.unpack("<B")
            dtype = np.dtype(r.take(dlen).decode())
            (ndim,) = r.unpack("<B")
            shape = r.unpack("<" + "Q" * ndim) if ndim else ()
            (nbytes,) = r.unpack("<Q")
            raw = r.take(nbytes)
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
    try:
        surfels = SurfelSet(**{k.split("/", 1)[1]: v for k, v in arrays.items()
                               if k.startswith("surfels/")})
    except TypeError as e:
        raise CheckpointError(f"{path}: incomplete surfel arrays") from e
    return Checkpoint(
        config=header["config"],
        surfels=surfels,
        optimizer={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("optimizer/")},
        iteration=header["iteration"],
        seed=header["seed"],
        extras={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("extras/")},
    )
