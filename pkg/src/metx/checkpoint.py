"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"METX1"                       magic
    u32  format version (1)
    u32  config length, then that many bytes of UTF-8 ``key = value`` text
         (``out_dir`` blanked)
    u32  vocab length, then that many bytes of UTF-8, one token per line
    u32  parameter count
    per parameter:
        u32 name length, UTF-8 name
        u32 ndim, ndim x u32 extents
        float32 payload, row-major
    u64  checksum: first 8 bytes (little-endian) of BLAKE2b over the
         concatenated float32 payloads, in file order
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import Vocab
from .tensor import Tensor

MAGIC = b"METX1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: Vocab
    params: dict


def _checksum(payloads) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in payloads:
        h.update(p)
    return int.from_bytes(h.digest(), "little")


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    # out_dir is where a run lives, not part of the model
    for blob in (ckpt.config.replace(out_dir="").to_text().encode(), "\n".join(ckpt.vocab.itos).encode()):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<I", len(ckpt.params)))
    payloads = []
    for name, t in ckpt.params.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        shape = t.shape
        buf.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        payloads.append(payload)
        buf.write(payload)
    buf.write(struct.pack("<Q", _checksum(payloads)))
    return buf.getvalue()


def from_bytes(raw: bytes) -> Checkpoint:
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("checkpoint truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    if bytes(take(5)) != MAGIC:
        raise CheckpointError("bad magic")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = RunConfig.from_text(bytes(take(u32())).decode())
    vocab = Vocab(bytes(take(u32())).decode().split("\n"))
    params, payloads = {}, []
    for _ in range(u32()):
        name = bytes(take(u32())).decode()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        payload = bytes(take(4 * n))
        payloads.append(payload)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    (stored,) = struct.unpack("<Q", take(8))
    if pos != len(raw):
        raise CheckpointError("trailing bytes after checksum")
    if stored != _checksum(payloads):
        raise CheckpointError("checksum mismatch")
    return Checkpoint(config, vocab, params)


def save(ckpt: Checkpoint, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def payload_size(raw: bytes) -> int:
    """Total bytes of float32 payload in a serialized checkpoint."""
    ck = from_bytes(raw)
    return 4 * sum(t.size for t in ck.params.values())
