"""Signing identities and a simulated TEE with a hardware-style quote contract.

The platform here is a local software root standing in for real attestation
hardware: it signs quotes over two measurement registers (register 0 is the
environment hash, register 1 the code image hash) and binds the attested
signing key into the quote's report data. Verification has the same shape a
real verifier would use — platform signature, nonce freshness, golden-value
register comparison — so swapping in real quotes only changes the issuer.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from atlas.canonical import (
    CanonicalDecodingError,
    blob_from_text,
    blob_to_text,
    canonical_json,
    digest_from_text,
    digest_to_text,
    ensure_utc_ms,
    format_timestamp,
    parse_timestamp,
    sha256,
    utc_now,
)

SIGNATURE_ALG = "ed25519"

REGISTER_ENVIRONMENT = 0
REGISTER_CODE_IMAGE = 1
QUOTE_REGISTER_COUNT = 2

NONCE_SIZE = 32
REPORT_DATA_SIZE = 64


class AttestationError(Exception):
    """Key handling or quote issuance failed."""


def key_fingerprint(public_key: bytes) -> str:
    """Key id: SHA-256 of the raw 32-byte public key, lowercase hex."""
    return sha256(public_key).hex()


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class KeyRecord:
    """Public half of a signing identity."""

    key_id: str
    public_key: bytes
    created_inside_tee: bool

    def __post_init__(self) -> None:
        if len(self.public_key) != 32:
            raise AttestationError(f"public key must be 32 bytes, got {len(self.public_key)}")
        if self.key_id != key_fingerprint(self.public_key):
            raise AttestationError("key_id does not recompute from public_key")

    def verify(self, signature: bytes, message: bytes) -> bool:
        return verify_signature(self.public_key, signature, message)

    def to_dict(self) -> dict[str, Any]:
        return {
            "key_id": self.key_id,
            "public_key": blob_to_text(self.public_key),
            "created_inside_tee": self.created_inside_tee,
        }

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "KeyRecord":
        return cls(
            key_id=tree["key_id"],
            public_key=blob_from_text(tree["public_key"]),
            created_inside_tee=bool(tree["created_inside_tee"]),
        )


@dataclass(frozen=True)
class ClaimSignature:
    """Detached signature over a structure's canonical claim bytes."""

    alg: str
    key_id: str
    sig: bytes

    def __post_init__(self) -> None:
        if self.alg != SIGNATURE_ALG:
            raise AttestationError(f"unsupported signature algorithm: {self.alg}")
        if len(self.sig) != 64:
            raise AttestationError(f"signature must be 64 bytes, got {len(self.sig)}")

    def to_dict(self) -> dict[str, Any]:
        return {"alg": self.alg, "key_id": self.key_id, "sig": blob_to_text(self.sig)}

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "ClaimSignature":
        return cls(alg=tree["alg"], key_id=tree["key_id"], sig=blob_from_text(tree["sig"]))


class Identity:
    """A signing keypair; the private half never leaves this object.

    Thread-safe: signing is stateless after construction.
    """

    def __init__(self, private_key: Ed25519PrivateKey, created_inside_tee: bool = True):
        self._private_key = private_key
        public = private_key.public_key().public_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PublicFormat.Raw,
        )
        self.record = KeyRecord(
            key_id=key_fingerprint(public),
            public_key=public,
            created_inside_tee=created_inside_tee,
        )

    @property
    def key_id(self) -> str:
        return self.record.key_id

    @property
    def public_key(self) -> bytes:
        return self.record.public_key

    @classmethod
    def generate(cls, created_inside_tee: bool = True) -> "Identity":
        try:
            return cls(Ed25519PrivateKey.generate(), created_inside_tee)
        except Exception as exc:  # entropy failure is fatal by contract
            raise AttestationError(f"key generation failed: {exc}") from exc

    def sign(self, message: bytes) -> bytes:
        return self._private_key.sign(message)

    def sign_claim(self, claim_bytes: bytes) -> ClaimSignature:
        return ClaimSignature(alg=SIGNATURE_ALG, key_id=self.key_id, sig=self.sign(claim_bytes))

    # -- PEM persistence ----------------------------------------------------

    def private_pem(self) -> bytes:
        return self._private_key.private_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )

    def public_pem(self) -> bytes:
        return self._private_key.public_key().public_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PublicFormat.SubjectPublicKeyInfo,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.private_pem())

    @classmethod
    def load(cls, path: str | Path, created_inside_tee: bool = True) -> "Identity":
        try:
            key = serialization.load_pem_private_key(Path(path).read_bytes(), password=None)
        except (OSError, ValueError) as exc:
            raise AttestationError(f"cannot load identity from {path}: {exc}") from exc
        if not isinstance(key, Ed25519PrivateKey):
            raise AttestationError(f"{path} is not an Ed25519 private key")
        return cls(key, created_inside_tee)


def generate_identity(created_inside_tee: bool = True) -> Identity:
    return Identity.generate(created_inside_tee)


def save_public_key(public_key: bytes, path: str | Path) -> None:
    pem = Ed25519PublicKey.from_public_bytes(public_key).public_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PublicFormat.SubjectPublicKeyInfo,
    )
    Path(path).write_bytes(pem)


def load_public_key(path: str | Path) -> bytes:
    try:
        key = serialization.load_pem_public_key(Path(path).read_bytes())
    except (OSError, ValueError) as exc:
        raise AttestationError(f"cannot load public key from {path}: {exc}") from exc
    if not isinstance(key, Ed25519PublicKey):
        raise AttestationError(f"{path} is not an Ed25519 public key")
    return key.public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )


# ---------------------------------------------------------------------------
# Quotes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TeeQuote:
    """Signed statement of measured platform state, bound to a key and nonce.

    ``report_data`` is nonce (32 bytes) followed by the SHA-256 of the
    attested signing key's public bytes.
    """

    measurement_registers: tuple[bytes, ...]
    report_data: bytes
    platform_key_id: str
    platform_sig: bytes
    issued_at: datetime

    def __post_init__(self) -> None:
        for register in self.measurement_registers:
            if len(register) != 32:
                raise AttestationError("measurement registers must be 32 bytes each")
        if len(self.report_data) != REPORT_DATA_SIZE:
            raise AttestationError(f"report_data must be {REPORT_DATA_SIZE} bytes")
        object.__setattr__(self, "measurement_registers", tuple(self.measurement_registers))
        object.__setattr__(self, "issued_at", ensure_utc_ms(self.issued_at))

    @property
    def nonce(self) -> bytes:
        return self.report_data[:NONCE_SIZE]

    @property
    def attested_key_hash(self) -> bytes:
        return self.report_data[NONCE_SIZE:]

    def binds_key(self, public_key: bytes) -> bool:
        return self.attested_key_hash == sha256(public_key)

    def signed_body(self) -> dict[str, Any]:
        return {
            "measurement_registers": [digest_to_text(r) for r in self.measurement_registers],
            "report_data": blob_to_text(self.report_data),
            "issued_at": format_timestamp(self.issued_at),
        }

    def signed_bytes(self) -> bytes:
        return canonical_json(self.signed_body())

    def to_dict(self) -> dict[str, Any]:
        tree = self.signed_body()
        tree["platform_key_id"] = self.platform_key_id
        tree["platform_sig"] = blob_to_text(self.platform_sig)
        return tree

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "TeeQuote":
        try:
            return cls(
                measurement_registers=tuple(
                    digest_from_text(r) for r in tree["measurement_registers"]
                ),
                report_data=blob_from_text(tree["report_data"]),
                platform_key_id=tree["platform_key_id"],
                platform_sig=blob_from_text(tree["platform_sig"]),
                issued_at=parse_timestamp(tree["issued_at"]),
            )
        except (KeyError, TypeError) as exc:
            raise CanonicalDecodingError(f"malformed quote: {exc}") from exc

    def to_blob(self) -> str:
        """Opaque transport form used inside manifests: base64 of the quote JSON."""
        return blob_to_text(canonical_json(self.to_dict()))

    @classmethod
    def from_blob(cls, text: str) -> "TeeQuote":
        from atlas.canonical import decode_json

        tree = decode_json(blob_from_text(text))
        if not isinstance(tree, dict):
            raise CanonicalDecodingError("quote blob does not decode to an object")
        return cls.from_dict(tree)


@dataclass(frozen=True)
class QuoteVerdict:
    accepted: bool
    reason: str | None = None

    @classmethod
    def accept(cls) -> "QuoteVerdict":
        return cls(True, None)

    @classmethod
    def reject(cls, reason: str) -> "QuoteVerdict":
        return cls(False, reason)


class TeePlatform:
    """Simulated attestation hardware: holds the platform root key, issues quotes."""

    def __init__(self, identity: Identity | None = None):
        self._identity = identity or Identity.generate(created_inside_tee=False)
        self._lock = threading.Lock()

    @property
    def key_id(self) -> str:
        return self._identity.key_id

    @property
    def public_key(self) -> bytes:
        return self._identity.public_key

    @property
    def identity(self) -> Identity:
        return self._identity

    def issue_quote(
        self,
        env_hash: bytes,
        code_hash: bytes,
        nonce: bytes,
        attested_key: KeyRecord,
    ) -> TeeQuote:
        if len(nonce) != NONCE_SIZE:
            raise AttestationError(f"nonce must be {NONCE_SIZE} bytes")
        report_data = nonce + sha256(attested_key.public_key)
        unsigned = TeeQuote(
            measurement_registers=(env_hash, code_hash),
            report_data=report_data,
            platform_key_id=self.key_id,
            platform_sig=bytes(64),
            issued_at=utc_now(),
        )
        with self._lock:
            sig = self._identity.sign(unsigned.signed_bytes())
        return TeeQuote(
            measurement_registers=unsigned.measurement_registers,
            report_data=report_data,
            platform_key_id=self.key_id,
            platform_sig=sig,
            issued_at=unsigned.issued_at,
        )


def _expected_register_digests(expected_registers: Sequence[Any]) -> list[bytes]:
    digests = []
    for item in expected_registers:
        if isinstance(item, bytes):
            digests.append(item)
        else:
            # GoldenValue-shaped: carries the signed measurement of a register
            digests.append(item.measurement.digest)
    return digests


def verify_quote(
    quote: TeeQuote,
    expected_registers: Sequence[Any] | None,
    nonce: bytes | None,
    platform_keys: Mapping[str, bytes],
) -> QuoteVerdict:
    """Check a quote against the platform key, a nonce, and golden registers.

    ``expected_registers`` accepts raw 32-byte digests or GoldenValue records;
    pass ``None`` to skip the golden-value comparison (historical quotes).
    ``nonce=None`` likewise skips the freshness check.
    """
    platform_key = platform_keys.get(quote.platform_key_id)
    if platform_key is None:
        return QuoteVerdict.reject("unknown-platform")
    if not verify_signature(platform_key, quote.platform_sig, quote.signed_bytes()):
        return QuoteVerdict.reject("bad-signature")
    if nonce is not None and quote.nonce != nonce:
        return QuoteVerdict.reject("nonce-mismatch")
    if expected_registers is not None:
        expected = _expected_register_digests(expected_registers)
        if len(expected) != len(quote.measurement_registers):
            return QuoteVerdict.reject("register-count")
        for got, want in zip(quote.measurement_registers, expected):
            if got != want:
                return QuoteVerdict.reject("register-mismatch")
    return QuoteVerdict.accept()
