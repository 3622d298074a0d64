"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"ADVMLMCK"
    version      u16
    fingerprint  32 bytes  sha256 of the canonical config text
    count        u32       number of blobs
    blob*        name_len u16, name utf-8, kind u8, ndim u8, shape u32*ndim,
                 nbytes u64, payload
    digest       32 bytes  sha256 of everything above

Blob kinds: 1 float32, 2 float64, 3 int64, 4 raw bytes.  Any mismatch in
magic, version, digest or length raises :class:`CheckpointError`; nothing
is returned from a file that fails verification.
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADVMLMCK"
FORMAT_VERSION = 1

_KINDS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_KIND_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}
_BYTES = 4


class CheckpointError(RuntimeError):
    pass


def encode(blobs: dict[str, np.ndarray | bytes], fingerprint: bytes) -> bytes:
    if len(fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), fingerprint, struct.pack("<I", len(blobs))]
    for name, value in blobs.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, (bytes, bytearray)):
            parts.append(struct.pack("<BB", _BYTES, 0))
            payload = bytes(value)
        else:
            arr = np.asarray(value)
            kind = _KIND_OF.get(arr.dtype)
            if kind is None:
                raise ValueError(f"unsupported blob dtype {arr.dtype} for {name}")
            parts.append(struct.pack("<BB", kind, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = np.ascontiguousarray(arr, dtype=_KINDS[kind]).tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> tuple[bytes, dict[str, np.ndarray | bytes]]:
    if len(data) < len(MAGIC) + 2 + 32 + 4 + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = data[:-32], data[-32:]
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint corrupted or truncated (digest mismatch)")
    pos = len(MAGIC) + 2
    fingerprint = body[pos : pos + 32]
    pos += 32
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    blobs: dict[str, np.ndarray | bytes] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            kind, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            payload = body[pos : pos + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError("checkpoint truncated inside blob")
            pos += nbytes
            if kind == _BYTES:
                blobs[name] = bytes(payload)
            elif kind in _KINDS:
                blobs[name] = np.frombuffer(payload, dtype=_KINDS[kind]).reshape(shape).copy()
            else:
                raise CheckpointError(f"unknown blob kind {kind}")
    except struct.error as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return fingerprint, blobs


def write(path, blobs: dict[str, np.ndarray | bytes], fingerprint: bytes) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(blobs, fingerprint))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read(path, expected_fingerprint: bytes | None = None) -> tuple[bytes, dict[str, np.ndarray | bytes]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    fingerprint, blobs = decode(data)
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise CheckpointError("config fingerprint mismatch: checkpoint was written under a different config")
    return fingerprint, blobs
