"""Canonical byte encoding shared by everything that is hashed or signed.

One encoding, used everywhere: UTF-8 JSON with keys sorted by code point and
no insignificant whitespace. Timestamps are RFC 3339 UTC with exactly
millisecond precision. 32-byte digests appear as ``sha256:<64 hex>``; other
binary fields as ``base64:<b64>``. Two equal values always produce identical
bytes, so signatures and digests are reproducible across processes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from datetime import datetime, timezone
from typing import Any, BinaryIO

DIGEST_PREFIX = "sha256:"
BLOB_PREFIX = "base64:"

_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")
_TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{3}Z$")

_CHUNK_SIZE = 64 * 1024


class CanonicalEncodingError(ValueError):
    """Value cannot be canonically encoded (non-finite float, bad type, ...)."""


class CanonicalDecodingError(ValueError):
    """Byte sequence is not a valid canonical encoding of the expected type."""


def canonical_json(tree: Any) -> bytes:
    """Encode a JSON tree (dict/list/str/int/float/bool/None) canonically.

    Keys are sorted lexicographically by code point; no whitespace is
    emitted. Non-finite floats are rejected rather than silently encoded.
    """
    try:
        text = json.dumps(
            tree,
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
        )
    except ValueError as exc:
        raise CanonicalEncodingError(f"non-encodable value in tree: {exc}") from exc
    except TypeError as exc:
        raise CanonicalEncodingError(f"non-JSON type in tree: {exc}") from exc
    return text.encode("utf-8")


def decode_json(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CanonicalDecodingError(f"not UTF-8: {exc}") from exc
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise CanonicalDecodingError(f"not valid JSON: {exc}") from exc


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_stream(stream: BinaryIO) -> tuple[bytes, int]:
    """Digest a readable byte stream; returns (digest, total length)."""
    hasher = hashlib.sha256()
    total = 0
    while True:
        chunk = stream.read(_CHUNK_SIZE)
        if not chunk:
            break
        hasher.update(chunk)
        total += len(chunk)
    return hasher.digest(), total


# ---------------------------------------------------------------------------
# Text forms for binary fields
# ---------------------------------------------------------------------------

def digest_to_text(digest: bytes) -> str:
    if len(digest) != 32:
        raise CanonicalEncodingError(f"digest must be 32 bytes, got {len(digest)}")
    return DIGEST_PREFIX + digest.hex()


def digest_from_text(text: str) -> bytes:
    if not isinstance(text, str) or not text.startswith(DIGEST_PREFIX):
        raise CanonicalDecodingError(f"digest text must start with {DIGEST_PREFIX!r}: {text!r}")
    hexpart = text[len(DIGEST_PREFIX):]
    if not _HEX64_RE.match(hexpart):
        raise CanonicalDecodingError(f"digest hex must match [0-9a-f]{{64}}: {hexpart!r}")
    return bytes.fromhex(hexpart)


def blob_to_text(blob: bytes) -> str:
    return BLOB_PREFIX + base64.b64encode(blob).decode("ascii")


def blob_from_text(text: str) -> bytes:
    if not isinstance(text, str) or not text.startswith(BLOB_PREFIX):
        raise CanonicalDecodingError(f"blob text must start with {BLOB_PREFIX!r}: {text!r}")
    try:
        return base64.b64decode(text[len(BLOB_PREFIX):], validate=True)
    except Exception as exc:
        raise CanonicalDecodingError(f"invalid base64 blob: {exc}") from exc


# ---------------------------------------------------------------------------
# Timestamps
# ---------------------------------------------------------------------------

def utc_now() -> datetime:
    """Current UTC time quantized to the millisecond the encoding carries."""
    return ensure_utc_ms(datetime.now(timezone.utc))


def ensure_utc_ms(dt: datetime) -> datetime:
    """Normalize to UTC and truncate below millisecond precision."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    else:
        dt = dt.astimezone(timezone.utc)
    return dt.replace(microsecond=(dt.microsecond // 1000) * 1000)


def format_timestamp(dt: datetime) -> str:
    dt = ensure_utc_ms(dt)
    return f"{dt:%Y-%m-%dT%H:%M:%S}.{dt.microsecond // 1000:03d}Z"


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str) or not _TIMESTAMP_RE.match(text):
        raise CanonicalDecodingError(f"timestamp must be RFC 3339 UTC with ms precision: {text!r}")
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.replace(tzinfo=timezone.utc)
