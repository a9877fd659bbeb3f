"""Named-tensor weight files (``.vgzw``).

Layout, little-endian::

    b"VGZW"  u32 version=1  u32 tensor_count
    repeated: u16 name_len, utf-8 name, u8 ndim, u32 dims[ndim], f32 data
"""

import os
import struct
import tempfile

import numpy as np

from .errors import BadMagic, DimMismatch, FormatError, VersionMismatch

MAGIC = b"VGZW"
VERSION = 1


def encode_tensors(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(blob):
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise BadMagic("not a VGZW weight file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionMismatch(f"unsupported VGZW version {version}")
    pos = 12
    out = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise DimMismatch(f"file truncated while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not utf-8: {exc}") from None
        (ndim,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"{name} data"), dtype="<f4")
        out[name] = data.reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise DimMismatch(f"{len(blob) - pos} trailing bytes after last tensor")
    return out


def atomic_write(path, blob):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, tensors):
    atomic_write(path, encode_tensors(tensors))


def load_tensors(path):
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
