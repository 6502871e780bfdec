"""The ``ATNLAB01`` tensor container.

Layout::

    b"ATNLAB01"                 8-byte magic
    uint64 little-endian        length of the JSON header in bytes
    JSON header (UTF-8)         {"format_version", "kind", "arch", "metadata",
                                 "tensors": [{"name", "shape", "offset", "nbytes"}]}
    float32 little-endian blobs in directory order; offsets are relative to
                                the first byte after the header

Checkpoints, cached datasets and adversarial-image archives all use it.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import CorruptHeaderError, TruncatedError, VersionMismatchError

MAGIC = b"ATNLAB01"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def dumps(kind, tensors, arch=None, metadata=None):
    """Serialize named arrays (cast to little-endian float32) to bytes."""
    directory = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        directory.append(
            {"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "arch": arch or {},
        "metadata": metadata or {},
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(hbytes)), hbytes, *blobs])


def loads(buf):
    """Parse container bytes into ``(header, {name: float32 array})``."""
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise CorruptHeaderError("corrupt header: bad magic string")
    if len(buf) < 16:
        raise TruncatedError("truncated file: header length missing")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise TruncatedError("truncated file: header runs past end of file")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
        directory = header["tensors"]
        version = header["format_version"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"corrupt header: {exc}") from None
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    body = memoryview(buf)[16 + hlen :]
    tensors = {}
    for entry in directory:
        start, n = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if start + n > len(body):
            raise TruncatedError(f"truncated file: tensor {entry['name']!r} incomplete")
        if n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptHeaderError(f"corrupt header: size of {entry['name']!r} disagrees with shape")
        arr = np.frombuffer(body[start : start + n], dtype=_LE_F32).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
    return header, tensors


def save(path, kind, tensors, arch=None, metadata=None):
    data = dumps(kind, tensors, arch, metadata)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
