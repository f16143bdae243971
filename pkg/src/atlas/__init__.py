"""Atlas: attestable pipeline provenance with a chained transparency log."""

__version__ = "0.1.0"

from atlas.attest import (
    ClaimSignature,
    Identity,
    KeyRecord,
    QuoteVerdict,
    TeePlatform,
    TeeQuote,
    generate_identity,
    verify_quote,
)
from atlas.log import (
    AdmissionError,
    ConsistencyProof,
    DirectLogClient,
    InclusionProof,
    SignedRoot,
    TransparencyLog,
    TrustStore,
)
from atlas.model import (
    ArtifactMeasurement,
    ArtifactRole,
    EventKind,
    GoldenValue,
    ManifestAssertion,
    MonitorEvent,
    OperationRecord,
    PipelineMetadata,
    TransformationAttestation,
    measure,
    measure_file,
)
from atlas.monitor import (
    BridgeServer,
    CheckpointWatcher,
    ManifestCache,
    PipelineRecorder,
    TrackedConfig,
    finalize_pipeline,
    watch_checkpoints,
)
from atlas.verifier import (
    Expectation,
    VerificationCache,
    VerificationReport,
    Verifier,
    audit_chain,
    invalidate,
)

__all__ = [
    "AdmissionError",
    "ArtifactMeasurement",
    "ArtifactRole",
    "BridgeServer",
    "CheckpointWatcher",
    "ClaimSignature",
    "ConsistencyProof",
    "DirectLogClient",
    "EventKind",
    "Expectation",
    "GoldenValue",
    "Identity",
    "InclusionProof",
    "KeyRecord",
    "ManifestAssertion",
    "ManifestCache",
    "MonitorEvent",
    "OperationRecord",
    "PipelineMetadata",
    "PipelineRecorder",
    "QuoteVerdict",
    "SignedRoot",
    "TeePlatform",
    "TeeQuote",
    "TrackedConfig",
    "TransformationAttestation",
    "TransparencyLog",
    "TrustStore",
    "VerificationCache",
    "VerificationReport",
    "Verifier",
    "audit_chain",
    "finalize_pipeline",
    "generate_identity",
    "invalidate",
    "measure",
    "measure_file",
    "verify_quote",
    "watch_checkpoints",
]
