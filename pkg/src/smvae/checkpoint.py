"""Portable binary containers for named float tensors.

Layout (all integers little-endian)::

    magic          4 bytes   b"SMVA" (checkpoints) or b"SMVD" (datasets)
    version        u32
    [metadata]     u32 length + UTF-8 JSON           (dataset containers only)
    count          u32
    count x        u32 name length, UTF-8 name, u32 rank, rank x u64 dims
    payloads       float32 values of every tensor, manifest order, row-major
    crc32          u32 over every preceding byte
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"SMVA"
DATASET_MAGIC = b"SMVD"
FORMAT_VERSION = 1


def encode(tensors, magic=CHECKPOINT_MAGIC, metadata=None):
    """Serialise an ordered mapping name -> array into container bytes."""
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    if magic == DATASET_MAGIC:
        blob = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
        parts += [struct.pack("<I", len(blob)), blob]
    elif metadata is not None:
        raise ValueError("only dataset containers carry metadata")
    arrays = [(name, np.asarray(value)) for name, value in tensors.items()]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for _, arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", offset=self.pos, path=self.path)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf, magic=CHECKPOINT_MAGIC, path=None):
    """Parse container bytes; returns ``(tensors, metadata)``.

    The CRC is checked before anything else is interpreted, so a damaged
    file never yields a partial result.
    """
    if len(buf) < 12:
        raise FormatError("file too short to be a tensor container", offset=len(buf), path=path)
    body, stored = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    actual = zlib.crc32(body)
    if actual != stored:
        raise FormatError(f"CRC mismatch (stored {stored:#010x}, computed {actual:#010x})", offset=len(body), path=path)
    r = _Reader(body, path)
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0, path=path)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (this build reads {FORMAT_VERSION})", offset=4, path=path)
    metadata = None
    if magic == DATASET_MAGIC:
        n = r.u32("metadata length")
        metadata = json.loads(r.take(n, "metadata").decode("utf-8"))
    count = r.u32("tensor count")
    manifest = []
    for _ in range(count):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, "dimensions"))
        manifest.append((name, dims))
    tensors = {}
    for name, dims in manifest:
        n = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(body):
        raise FormatError("trailing bytes after the last payload", offset=r.pos, path=path)
    return tensors, metadata


def save_checkpoint(model, path):
    """Write every model parameter to ``path`` (float32 payloads)."""
    path = Path(path)
    data = encode(model.state_dict(), CHECKPOINT_MAGIC)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Read a checkpoint into a name -> float32 array dict."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc.strerror}", path=str(path)) from exc
    tensors, _ = decode(buf, CHECKPOINT_MAGIC, str(path))
    return tensors


def load_checkpoint(model, path):
    """Load parameters into ``model``, widening to its precision if needed."""
    model.load_state_dict(read_checkpoint(path))
    return model
