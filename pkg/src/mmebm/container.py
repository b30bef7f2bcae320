"""MMEB binary container used for datasets, generations and checkpoints.

Layout (all integers little-endian)::

    b"MMEB" | u32 format_version | u32 manifest_len | manifest (UTF-8) | u32 crc32(manifest)
    u32 n_tensors
    repeated n_tensors times:
        u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | u64 * ndim shape
        payload | u32 crc32(name .. payload)

The manifest is ``key=value`` text, one pair per line, keys sorted on write.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadMagicError, ChecksumError, ContainerError, TruncatedError, VersionError

MAGIC = b"MMEB"
FORMAT_VERSION = 1

_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("u1"),
}


def _dtype_code(arr: np.ndarray) -> int:
    for code, cand in _DTYPES.items():
        if cand.kind == arr.dtype.kind and cand.itemsize == arr.dtype.itemsize:
            return code
    raise TypeError(f"unsupported tensor dtype {arr.dtype}")


def format_manifest(manifest: Mapping[str, object]) -> str:
    lines = []
    for key in sorted(manifest):
        value = str(manifest[key])
        if "\n" in key or "=" in key or "\n" in value:
            raise ValueError(f"manifest entry {key!r} cannot contain newlines or '=' in key")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(f"malformed manifest line: {line!r}")
        out[key] = value
    return out


def encode(tensors: Mapping[str, np.ndarray], manifest: Mapping[str, object] | None = None) -> bytes:
    man = format_manifest(manifest or {}).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(man)), man,
             struct.pack("<I", zlib.crc32(man)), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        code = _dtype_code(arr)
        arr = np.array(arr, dtype=_DTYPES[code], order="C")
        bname = name.encode("utf-8")
        head = struct.pack("<H", len(bname)) + bname + struct.pack("<BB", code, arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body = arr.tobytes(order="C")
        crc = zlib.crc32(body, zlib.crc32(head))
        parts += [head, body, struct.pack("<I", crc)]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"container truncated: need {n} bytes at offset {self.pos}, "
                                 f"have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    rd = _Reader(buf)
    if rd.take(4) != MAGIC:
        raise BadMagicError("not an MMEB container (bad magic bytes)")
    version, man_len = rd.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format_version {version} (expected {FORMAT_VERSION})")
    man = rd.take(man_len)
    (man_crc,) = rd.unpack("<I")
    if zlib.crc32(man) != man_crc:
        raise ChecksumError("manifest checksum mismatch")
    manifest = parse_manifest(man.decode("utf-8"))
    (count,) = rd.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = rd.pos
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8", errors="replace")
        code, ndim = rd.unpack("<BB")
        shape = rd.unpack(f"<{ndim}Q") if ndim else ()
        head = rd.buf[start:rd.pos]
        if code not in _DTYPES:
            raise ChecksumError(f"tensor {name!r}: unknown dtype code {code} (corrupt header)")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        body = rd.take(nbytes)
        (crc,) = rd.unpack("<I")
        if zlib.crc32(body, zlib.crc32(head)) != crc:
            raise ChecksumError(f"tensor {name!r}: payload checksum mismatch")
        tensors[name] = np.frombuffer(body, dtype=dt).reshape(shape).copy()
    if rd.pos != len(buf):
        raise ContainerError(f"{len(buf) - rd.pos} trailing bytes after last tensor")
    return manifest, tensors


def write(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
          manifest: Mapping[str, object] | None = None) -> None:
    """Write atomically: a crash never leaves a half-written file at ``path``."""
    write_bytes(path, encode(tensors, manifest))


def write_bytes(path: str | os.PathLike, buf: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
