"""Domain types for artifact measurements, monitor events, and manifests.

Everything here is an immutable record with a canonical dict form; the byte
encoding of that form (see :mod:`atlas.canonical`) is what gets hashed and
signed. A manifest's claim digest — SHA-256 of its canonical bytes minus the
signature — is the identifier every precursor reference and log lookup uses.
"""

from __future__ import annotations

import io
import uuid
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, BinaryIO, Mapping

from atlas.attest import ClaimSignature, Identity, TeeQuote, verify_signature
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
    sha256_stream,
    utc_now,
)

MANIFEST_EXTENSION = ".atlas.json"


class ModelError(ValueError):
    """A domain type invariant was violated."""


class MeasurementError(Exception):
    """Reading or digesting an artifact failed."""

    def __init__(self, artifact_id: str, message: str):
        super().__init__(f"{artifact_id}: {message}")
        self.artifact_id = artifact_id


class ArtifactRole(str, Enum):
    DATASET = "dataset"
    MODEL_WEIGHTS = "model-weights"
    CHECKPOINT = "checkpoint"
    CONFIG = "config"
    CODE = "code"
    METADATA = "metadata"


class EventKind(str, Enum):
    CHECKPOINT_CREATED = "checkpoint_created"
    CHECKPOINT_MODIFIED = "checkpoint_modified"
    EPOCH_START = "epoch_start"
    EPOCH_END = "epoch_end"
    LAYER_ACTIVATION = "layer_activation"
    GRADIENT = "gradient"
    CONFIG_ACCESS = "config_access"
    CONFIG_UPDATE = "config_update"


def _require_digest(value: bytes, what: str) -> None:
    if not isinstance(value, bytes) or len(value) != 32:
        raise ModelError(f"{what} must be a 32-byte digest")


# ---------------------------------------------------------------------------
# Measurements and golden values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArtifactMeasurement:
    """Content digest and identity of one artifact."""

    artifact_id: str
    role: ArtifactRole
    digest: bytes
    size_bytes: int
    hash_alg: str = "sha-256"

    def __post_init__(self) -> None:
        _require_digest(self.digest, "digest")
        if self.size_bytes < 0:
            raise ModelError("size_bytes must be non-negative")
        if self.hash_alg != "sha-256":
            raise ModelError(f"unsupported hash_alg: {self.hash_alg}")
        object.__setattr__(self, "role", ArtifactRole(self.role))

    @property
    def digest_hex(self) -> str:
        return self.digest.hex()

    def to_dict(self) -> dict[str, Any]:
        return {
            "artifact_id": self.artifact_id,
            "role": self.role.value,
            "hash_alg": self.hash_alg,
            "digest": digest_to_text(self.digest),
            "size_bytes": self.size_bytes,
        }

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "ArtifactMeasurement":
        return cls(
            artifact_id=tree["artifact_id"],
            role=ArtifactRole(tree["role"]),
            digest=digest_from_text(tree["digest"]),
            size_bytes=tree["size_bytes"],
            hash_alg=tree["hash_alg"],
        )


def measure(
    source: bytes | BinaryIO,
    artifact_id: str,
    role: ArtifactRole | str,
) -> ArtifactMeasurement:
    """Measure raw bytes or a readable stream into an ArtifactMeasurement."""
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    try:
        digest, size = sha256_stream(source)
    except OSError as exc:
        raise MeasurementError(artifact_id, f"read failed: {exc}") from exc
    return ArtifactMeasurement(
        artifact_id=artifact_id,
        role=ArtifactRole(role),
        digest=digest,
        size_bytes=size,
    )


def measure_file(
    path: str | Path,
    role: ArtifactRole | str,
    artifact_id: str | None = None,
) -> ArtifactMeasurement:
    path = Path(path)
    artifact_id = artifact_id or path.resolve().as_uri()
    try:
        with path.open("rb") as stream:
            return measure(stream, artifact_id, role)
    except OSError as exc:
        raise MeasurementError(artifact_id, f"cannot open {path}: {exc}") from exc


@dataclass(frozen=True)
class GoldenValue:
    """Producer-signed known-good measurement of an artifact."""

    measurement: ArtifactMeasurement
    producer_key_id: str
    signature: bytes
    issued_at: datetime

    def __post_init__(self) -> None:
        object.__setattr__(self, "issued_at", ensure_utc_ms(self.issued_at))

    def signed_bytes(self) -> bytes:
        return canonical_json(self.measurement.to_dict())

    def verify(self, producer_public_key: bytes) -> bool:
        return verify_signature(producer_public_key, self.signature, self.signed_bytes())

    @classmethod
    def issue(cls, measurement: ArtifactMeasurement, producer: Identity) -> "GoldenValue":
        payload = canonical_json(measurement.to_dict())
        return cls(
            measurement=measurement,
            producer_key_id=producer.key_id,
            signature=producer.sign(payload),
            issued_at=utc_now(),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "measurement": self.measurement.to_dict(),
            "producer_key_id": self.producer_key_id,
            "signature": blob_to_text(self.signature),
            "issued_at": format_timestamp(self.issued_at),
        }

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "GoldenValue":
        return cls(
            measurement=ArtifactMeasurement.from_dict(tree["measurement"]),
            producer_key_id=tree["producer_key_id"],
            signature=blob_from_text(tree["signature"]),
            issued_at=parse_timestamp(tree["issued_at"]),
        )


# ---------------------------------------------------------------------------
# Operations and monitor events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperationRecord:
    """One transformation step that produced outputs."""

    name: str
    parameters_hash: bytes
    started_at: datetime
    ended_at: datetime

    def __post_init__(self) -> None:
        _require_digest(self.parameters_hash, "parameters_hash")
        object.__setattr__(self, "started_at", ensure_utc_ms(self.started_at))
        object.__setattr__(self, "ended_at", ensure_utc_ms(self.ended_at))
        if self.ended_at < self.started_at:
            raise ModelError("operation ended before it started")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "parameters_hash": digest_to_text(self.parameters_hash),
            "started_at": format_timestamp(self.started_at),
            "ended_at": format_timestamp(self.ended_at),
        }

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "OperationRecord":
        return cls(
            name=tree["name"],
            parameters_hash=digest_from_text(tree["parameters_hash"]),
            started_at=parse_timestamp(tree["started_at"]),
            ended_at=parse_timestamp(tree["ended_at"]),
        )


class EventSchemaError(ModelError):
    """Event payload does not match the fixed schema for its kind."""


# Required payload keys per event kind. Checkpoint events may substitute an
# ``error`` annotation for their digest fields when the file was unreadable.
_PAYLOAD_SCHEMA: dict[EventKind, tuple[str, ...]] = {
    EventKind.CHECKPOINT_CREATED: ("path", "digest"),
    EventKind.CHECKPOINT_MODIFIED: ("path", "digest", "previous_digest"),
    EventKind.EPOCH_START: ("epoch", "optimizer_config_hash"),
    EventKind.EPOCH_END: ("epoch", "metrics", "model_state_hash"),
    EventKind.LAYER_ACTIVATION: ("layer_id", "stats"),
    EventKind.GRADIENT: ("magnitude",),
    EventKind.CONFIG_ACCESS: ("key",),
    EventKind.CONFIG_UPDATE: ("key", "old", "new", "version"),
}

_CHECKPOINT_KINDS = (EventKind.CHECKPOINT_CREATED, EventKind.CHECKPOINT_MODIFIED)


def validate_event_payload(kind: EventKind, payload: Mapping[str, Any]) -> None:
    if "body_ref" in payload:
        return  # decomposed payload: full body lives in the manifest cache
    required = _PAYLOAD_SCHEMA[kind]
    if kind in _CHECKPOINT_KINDS and "error" in payload:
        required = ("path",)
    missing = [key for key in required if key not in payload]
    if missing:
        raise EventSchemaError(f"{kind.value} payload missing {missing}")


@dataclass(frozen=True)
class MonitorEvent:
    """One observed pipeline fact."""

    kind: EventKind
    timestamp: datetime
    payload: Mapping[str, Any]

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EventKind(self.kind))
        object.__setattr__(self, "timestamp", ensure_utc_ms(self.timestamp))
        object.__setattr__(self, "payload", dict(self.payload))
        validate_event_payload(self.kind, self.payload)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "timestamp": format_timestamp(self.timestamp),
            "payload": dict(self.payload),
        }

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    def body_hash(self) -> bytes:
        return sha256(self.canonical_bytes())

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "MonitorEvent":
        return cls(
            kind=EventKind(tree["kind"]),
            timestamp=parse_timestamp(tree["timestamp"]),
            payload=tree["payload"],
        )


@dataclass(frozen=True)
class PipelineMetadata:
    """Collected runtime record of one pipeline execution."""

    execution_name: str
    pipeline_spec: Mapping[str, Any]
    events: tuple[MonitorEvent, ...]
    system_quote: TeeQuote

    def __post_init__(self) -> None:
        object.__setattr__(self, "pipeline_spec", dict(self.pipeline_spec))
        object.__setattr__(self, "events", tuple(self.events))
        for earlier, later in zip(self.events, self.events[1:]):
            if later.timestamp < earlier.timestamp:
                raise ModelError("events must be ordered by non-decreasing timestamp")

    def to_dict(self) -> dict[str, Any]:
        return {
            "execution_name": self.execution_name,
            "pipeline_spec": dict(self.pipeline_spec),
            "events": [event.to_dict() for event in self.events],
            "system_quote": self.system_quote.to_blob(),
        }

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "PipelineMetadata":
        return cls(
            execution_name=tree["execution_name"],
            pipeline_spec=tree["pipeline_spec"],
            events=tuple(MonitorEvent.from_dict(e) for e in tree["events"]),
            system_quote=TeeQuote.from_blob(tree["system_quote"]),
        )


# ---------------------------------------------------------------------------
# Transformation attestations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestAssertion:
    """Label plus digest of an externally stored assertion body."""

    label: str
    body_hash: bytes

    def __post_init__(self) -> None:
        _require_digest(self.body_hash, "body_hash")

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "body_hash": digest_to_text(self.body_hash)}

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "ManifestAssertion":
        return cls(label=tree["label"], body_hash=digest_from_text(tree["body_hash"]))


def new_manifest_id() -> str:
    return f"urn:atlas:manifest:{uuid.uuid4()}"


@dataclass(frozen=True)
class TransformationAttestation:
    """Signed manifest binding outputs to inputs, operations, and precursors."""

    manifest_id: str
    inputs: tuple[ArtifactMeasurement, ...]
    outputs: tuple[ArtifactMeasurement, ...]
    operations: tuple[OperationRecord, ...]
    precursor_hashes: tuple[bytes, ...]
    pipeline_metadata_hash: bytes
    client_quote: TeeQuote
    assertions: tuple[ManifestAssertion, ...] = ()
    signature: ClaimSignature | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "operations", tuple(self.operations))
        object.__setattr__(self, "precursor_hashes", tuple(self.precursor_hashes))
        object.__setattr__(self, "assertions", tuple(self.assertions))
        if not self.outputs:
            raise ModelError("outputs must be non-empty")
        for precursor in self.precursor_hashes:
            _require_digest(precursor, "precursor hash")
        if len(set(self.precursor_hashes)) != len(self.precursor_hashes):
            raise ModelError("precursor hashes must be pairwise distinct")
        _require_digest(self.pipeline_metadata_hash, "pipeline_metadata_hash")
        if self.operations:
            input_digests = {m.digest for m in self.inputs}
            for output in self.outputs:
                if output.digest in input_digests:
                    raise ModelError(
                        f"output {output.artifact_id} repeats an input digest; "
                        "a transformation must produce new bytes"
                    )

    def claim_dict(self) -> dict[str, Any]:
        return {
            "manifest_id": self.manifest_id,
            "inputs": [m.to_dict() for m in self.inputs],
            "outputs": [m.to_dict() for m in self.outputs],
            "operations": [op.to_dict() for op in self.operations],
            "precursor_hashes": [digest_to_text(h) for h in self.precursor_hashes],
            "pipeline_metadata_hash": digest_to_text(self.pipeline_metadata_hash),
            "client_quote": self.client_quote.to_blob(),
            "assertions": [a.to_dict() for a in self.assertions],
        }

    def claim_bytes(self) -> bytes:
        return canonical_json(self.claim_dict())

    def claim_digest(self) -> bytes:
        return sha256(self.claim_bytes())

    def signed(self, identity: Identity) -> "TransformationAttestation":
        signature = identity.sign_claim(self.claim_bytes())
        return TransformationAttestation(
            manifest_id=self.manifest_id,
            inputs=self.inputs,
            outputs=self.outputs,
            operations=self.operations,
            precursor_hashes=self.precursor_hashes,
            pipeline_metadata_hash=self.pipeline_metadata_hash,
            client_quote=self.client_quote,
            assertions=self.assertions,
            signature=signature,
        )

    def verify_claim_signature(self, public_key: bytes) -> bool:
        if self.signature is None:
            return False
        return verify_signature(public_key, self.signature.sig, self.claim_bytes())

    def to_dict(self) -> dict[str, Any]:
        tree = self.claim_dict()
        tree["signature"] = self.signature.to_dict() if self.signature else None
        return tree

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "TransformationAttestation":
        signature = tree.get("signature")
        return cls(
            manifest_id=tree["manifest_id"],
            inputs=tuple(ArtifactMeasurement.from_dict(m) for m in tree["inputs"]),
            outputs=tuple(ArtifactMeasurement.from_dict(m) for m in tree["outputs"]),
            operations=tuple(OperationRecord.from_dict(op) for op in tree["operations"]),
            precursor_hashes=tuple(digest_from_text(h) for h in tree["precursor_hashes"]),
            pipeline_metadata_hash=digest_from_text(tree["pipeline_metadata_hash"]),
            client_quote=TeeQuote.from_blob(tree["client_quote"]),
            assertions=tuple(ManifestAssertion.from_dict(a) for a in tree["assertions"]),
            signature=ClaimSignature.from_dict(signature) if signature else None,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.canonical_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "TransformationAttestation":
        from atlas.canonical import decode_json

        tree = decode_json(Path(path).read_bytes())
        if not isinstance(tree, dict):
            raise CanonicalDecodingError(f"{path} does not contain a manifest object")
        return cls.from_dict(tree)


def canonical_bytes(value: Any) -> bytes:
    """Canonical bytes of a domain value or a plain JSON tree."""
    if hasattr(value, "canonical_bytes"):
        return value.canonical_bytes()
    if hasattr(value, "to_dict"):
        return canonical_json(value.to_dict())
    return canonical_json(value)
