"""Shared framing for the binary dataset and checkpoint files.

Every file is ``magic | version (u16 LE) | body | sha256(magic..body)``.
Headers carry their own CRC32 so that a damaged length field is reported
as corruption rather than truncation. The byte layouts are documented in
``docs/formats.md``.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

DIGEST_SIZE = 32
CRC_SIZE = 4


class FileFormatError(ValueError):
    """The bytes are not a file of the expected kind."""


class UnsupportedVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256_hex(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def seal(payload: bytes) -> bytes:
    return payload + hashlib.sha256(payload).digest()


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def crc32_bytes(block: bytes) -> bytes:
    return struct.pack("<I", zlib.crc32(block))


def read_checked(data: bytes, start: int, length: int) -> bytes:
    """Return ``data[start:start+length]`` after checking the CRC32 stored right after it."""
    end = start + length
    if len(data) < end + CRC_SIZE:
        raise TruncatedFileError(f"file ends inside a header ({len(data)} < {end + CRC_SIZE} bytes)")
    block = bytes(data[start:end])
    if crc32_bytes(block) != bytes(data[end:end + CRC_SIZE]):
        raise ChecksumError("checksum mismatch: header is corrupted")
    return block


def open_frame(data: bytes, magic: bytes, versions) -> int:
    """Check magic and version and return the version.

    The digest is verified separately via :func:`verify_digest` once the
    caller knows the expected length, so truncation can be told apart from
    corruption.
    """
    if len(data) < len(magic) + 2:
        raise TruncatedFileError("file shorter than its header")
    if data[: len(magic)] != magic:
        raise FileFormatError(f"bad magic {bytes(data[:len(magic)])!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<H", data, len(magic))
    if version not in versions:
        raise UnsupportedVersionError(
            f"format version {version} not supported (reader knows {sorted(versions)})"
        )
    return version


def digest_ok(data: bytes, digest_size: int = DIGEST_SIZE, algorithm: str = "sha256") -> bool:
    """Whether the trailing digest matches everything before it."""
    if len(data) < digest_size:
        return False
    payload = bytes(data[:-digest_size])
    stored = bytes(data[-digest_size:])
    if algorithm == "sha256":
        return hashlib.sha256(payload).digest() == stored
    if algorithm == "crc32":
        return struct.pack("<I", zlib.crc32(payload)) == stored
    raise ValueError(f"unknown checksum algorithm {algorithm!r}")


def verify_digest(data: bytes, expected_length: int, digest_size: int = DIGEST_SIZE,
                  algorithm: str = "sha256") -> None:
    """Raise the most specific error for a damaged file, or return if intact."""
    if digest_ok(data, digest_size, algorithm):
        if len(data) != expected_length:
            raise FileFormatError(
                f"checksum is valid but length {len(data)} disagrees with the header ({expected_length})"
            )
        return
    if len(data) < expected_length:
        raise TruncatedFileError(f"expected {expected_length} bytes, found {len(data)}")
    raise ChecksumError("checksum mismatch: file is corrupted")
