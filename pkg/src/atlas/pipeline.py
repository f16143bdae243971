"""Synthetic pipeline driver, demo lineage builder, and attack injection.

The trainer here does deterministic pseudo-training (hash-chained CPU work,
checkpoint files, metric events) so the full workflow — measure, monitor,
attest, submit, verify — runs end to end without any ML framework. The
injection helpers mutate artifacts, served attestations, or stage structure
to exercise the three detection paths, and report which check caught them.
"""

from __future__ import annotations

import hashlib
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from atlas.attest import Identity, TeePlatform, verify_quote
from atlas.canonical import canonical_json, digest_to_text, sha256, utc_now
from atlas.log import (
    DirectLogClient,
    ENTRY_ATTESTATION,
    FetchedEntry,
    GOLDEN_CODE_IMAGE_ID,
    GOLDEN_ENVIRONMENT_ID,
    TransparencyLog,
    TrustStore,
)
from atlas.model import (
    ArtifactMeasurement,
    ArtifactRole,
    GoldenValue,
    OperationRecord,
    PipelineMetadata,
    TransformationAttestation,
    measure,
    measure_file,
)
from atlas.monitor import (
    BridgeServer,
    CheckpointWatcher,
    FrameSender,
    ManifestCache,
    PipelineRecorder,
    TrackedConfig,
    finalize_pipeline,
)
from atlas.verifier import (
    Expectation,
    VerificationCache,
    VerificationReport,
    Verifier,
)

DEMO_STAGE_NAMES = (
    "dataset-ingest",
    "dataset-clean",
    "dataset-tokenize",
    "dataset-split",
    "config-freeze",
    "code-package",
    "base-model-fetch",
    "train-run",
    "checkpoint-select",
    "weights-merge",
    "eval-holdout",
    "eval-bias",
    "eval-robustness",
    "model-quantize",
    "model-package",
    "release-notes",
    "release-sign",
    "registry-push",
    "deploy-bundle",
    "deploy-verify",
)

DEMO_MONITORED_STAGE = "train-run"
DEMO_SEAL_AFTER = ("dataset-split", "eval-robustness")

# Appendix-style execution parameters used by the synthetic trainer.
DEFAULT_PIPELINE_SPEC: dict[str, Any] = {
    "parameters": {
        "learning_rate": 0.001,
        "batch_size": 32,
        "random_seed": 42,
        "optimizer_config": {"type": "Adam", "beta1": 0.9, "beta2": 0.999},
    },
    "runtime_config": {"output_directory": "file://./artifacts", "framework": "synthetic-1.0"},
}


def deterministic_bytes(tag: str, size: int, seed: int = 42) -> bytes:
    """Reproducible pseudo-random bytes via hash counter mode."""
    out = bytearray()
    counter = 0
    base = f"{seed}:{tag}".encode()
    while len(out) < size:
        out.extend(hashlib.sha256(base + counter.to_bytes(8, "big")).digest())
        counter += 1
    return bytes(out[:size])


# ---------------------------------------------------------------------------
# Synthetic trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainerSettings:
    epochs: int = 4
    work_per_epoch: int = 6_000  # 8 KiB hash rounds; large blocks release the GIL
    checkpoint_every: int = 2
    checkpoint_size: int = 32 * 1024
    seed: int = 42


class SyntheticTrainer:
    """Deterministic pseudo-training run that looks like a pipeline to Atlas.

    With default settings it emits 16 bridge frames (4 epochs: start/end plus
    one activation and one gradient each) and touches the tracked config
    twice (one get, one set); together with the two checkpoint files the
    watcher reports, a fully monitored run records exactly 20 events.
    """

    def __init__(
        self,
        checkpoint_dir: str | Path,
        settings: TrainerSettings | None = None,
        emitter: FrameSender | None = None,
        config: TrackedConfig | None = None,
    ):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.settings = settings or TrainerSettings()
        self.emitter = emitter
        self.config = config if config is not None else TrackedConfig(
            dict(DEFAULT_PIPELINE_SPEC["parameters"])
        )
        self.checkpoints_written: list[Path] = []
        self.weights_path: Path | None = None

    def _emit(self, kind: str, **payload: Any) -> None:
        if self.emitter is not None:
            response = self.emitter.emit(kind, **payload)
            if not response.get("ok"):
                raise RuntimeError(f"bridge rejected {kind}: {response}")

    def _work(self, epoch: int) -> bytes:
        state = deterministic_bytes(f"epoch-{epoch}", 32, self.settings.seed)
        block = deterministic_bytes(f"block-{epoch}", 8 * 1024, self.settings.seed)
        for _ in range(self.settings.work_per_epoch):
            state = hashlib.sha256(state + block).digest()
        return state

    def _optimizer_config_hash(self) -> str:
        optimizer = DEFAULT_PIPELINE_SPEC["parameters"]["optimizer_config"]
        return digest_to_text(sha256(canonical_json(optimizer)))

    def run(self) -> None:
        settings = self.settings
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        for epoch in range(1, settings.epochs + 1):
            self._emit(
                "epoch_start",
                epoch=epoch,
                optimizer_config_hash=self._optimizer_config_hash(),
            )
            if epoch == 1:
                self.config.get("learning_rate")
            if epoch == 3:
                self.config.set("learning_rate", 0.0005)
            state = self._work(epoch)
            self._emit(
                "layer_activation",
                layer_id=f"encoder.layer.{epoch % 2}",
                stats={
                    "mean": round(0.1 * epoch, 6),
                    "std": round(1.0 / epoch, 6),
                    "numel": 1024,
                },
            )
            self._emit(
                "gradient",
                magnitude=round(1.0 / (epoch * epoch), 6),
                norm="l2",
            )
            if epoch % settings.checkpoint_every == 0:
                path = self.checkpoint_dir / f"ckpt-{epoch:03d}.pt"
                path.write_bytes(
                    deterministic_bytes(f"ckpt-{epoch}", settings.checkpoint_size, settings.seed)
                )
                self.checkpoints_written.append(path)
            self._emit(
                "epoch_end",
                epoch=epoch,
                metrics={"loss": round(2.0 / epoch, 6), "accuracy": round(0.7 + 0.05 * epoch, 6)},
                model_state_hash=digest_to_text(sha256(state)),
            )
        self.weights_path = self.checkpoint_dir / "final-weights.bin"
        self.weights_path.write_bytes(
            deterministic_bytes("final-weights", settings.checkpoint_size, settings.seed)
        )


@dataclass
class TrainingRun:
    elapsed: float
    manifest: TransformationAttestation | None
    acked_events: int
    emitted_frames: int
    recorder: PipelineRecorder | None
    checkpoint_dir: Path
    output_measurements: list[ArtifactMeasurement] = field(default_factory=list)


def run_synthetic_training(
    workdir: str | Path,
    monitored: bool,
    env: "DemoEnv | None" = None,
    execution_name: str = "train-run",
    settings: TrainerSettings | None = None,
    inputs: Sequence[ArtifactMeasurement] = (),
    precursors: Sequence[bytes] = (),
    artifact_tag: str = "train",
) -> TrainingRun:
    """One synthetic pipeline execution, optionally under full monitoring.

    The reported ``elapsed`` is the trainer's wall time only — the overhead
    the monitor adds to the pipeline itself, not manifest assembly.
    """
    workdir = Path(workdir)
    checkpoint_dir = workdir / "checkpoints"
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    settings = settings or TrainerSettings()

    if not monitored:
        trainer = SyntheticTrainer(checkpoint_dir, settings, emitter=None)
        started = time.perf_counter()
        trainer.run()
        elapsed = time.perf_counter() - started
        return TrainingRun(
            elapsed=elapsed,
            manifest=None,
            acked_events=0,
            emitted_frames=0,
            recorder=None,
            checkpoint_dir=checkpoint_dir,
        )

    if env is None:
        raise ValueError("monitored runs need a provisioned environment")

    recorder = PipelineRecorder(
        execution_name=execution_name,
        pipeline_spec=DEFAULT_PIPELINE_SPEC,
        env_hash=env.env_hash,
        code_hash=env.code_hash,
    )
    nonce = os.urandom(32)
    system_quote = env.platform.issue_quote(
        env.env_hash, env.code_hash, nonce, env.client_identity.record
    )
    verdict = verify_quote(
        system_quote,
        expected_registers=[env.env_hash, env.code_hash],
        nonce=nonce,
        platform_keys={env.platform.key_id: env.platform.public_key},
    )
    recorder.attach_system_quote(system_quote, verdict)

    watcher = CheckpointWatcher(checkpoint_dir, recorder.sink("watcher")).start()
    socket_path = str(workdir / "bridge.sock")
    bridge = BridgeServer(socket_path, recorder, watcher).start()
    config = TrackedConfig(
        dict(DEFAULT_PIPELINE_SPEC["parameters"]), recorder.sink("config")
    )
    emitted = 0
    try:
        with FrameSender(socket_path) as sender:
            counting = _CountingSender(sender)
            trainer = SyntheticTrainer(checkpoint_dir, settings, counting, config)
            started = time.perf_counter()
            trainer.run()
            elapsed = time.perf_counter() - started
            emitted = counting.count
        watcher.wait_settled()
    finally:
        bridge.stop()
        watcher.stop()

    outputs = [
        measure_file(p, ArtifactRole.CHECKPOINT, f"urn:atlas:artifact:{artifact_tag}:{p.name}")
        for p in sorted(trainer.checkpoints_written)
    ]
    assert trainer.weights_path is not None
    outputs.append(
        measure_file(
            trainer.weights_path,
            ArtifactRole.MODEL_WEIGHTS,
            f"urn:atlas:artifact:{artifact_tag}:weights",
        )
    )
    cache = ManifestCache(workdir / "manifest-cache")
    manifest = finalize_pipeline(
        recorder=recorder,
        inputs=inputs,
        outputs=outputs,
        precursors=precursors,
        identity=env.client_identity,
        platform=env.platform,
        cache=cache,
    )
    return TrainingRun(
        elapsed=elapsed,
        manifest=manifest,
        acked_events=bridge.acked_events,
        emitted_frames=emitted,
        recorder=recorder,
        checkpoint_dir=checkpoint_dir,
        output_measurements=outputs,
    )


class _CountingSender:
    """FrameSender wrapper counting event frames the trainer emits."""

    def __init__(self, inner: FrameSender):
        self.inner = inner
        self.count = 0

    def emit(self, kind: str, **payload: Any) -> dict[str, Any]:
        response = self.inner.emit(kind, **payload)
        if response.get("ok"):
            self.count += 1
        return response


# ---------------------------------------------------------------------------
# Provisioning and chain building
# ---------------------------------------------------------------------------

@dataclass
class DemoEnv:
    workdir: Path
    platform: TeePlatform
    client_identity: Identity
    producer_identity: Identity
    log: TransparencyLog
    client: DirectLogClient
    trust: TrustStore
    env_hash: bytes
    code_hash: bytes


def provision(workdir: str | Path, log_dir: str | Path | None = None) -> DemoEnv:
    """Set up platform, identities, trust, log, and golden register values."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    platform = TeePlatform()
    client_identity = Identity.generate(created_inside_tee=True)
    producer_identity = Identity.generate(created_inside_tee=False)

    trust = TrustStore()
    trust.add_platform_key(platform.key_id, platform.public_key)
    trust.add_producer_key(producer_identity.key_id, producer_identity.public_key)

    env_descriptor = canonical_json({"image": "atlas-sim-env", "version": "0.1.0"})
    code_descriptor = canonical_json(
        {"pipeline": "synthetic-finetune", "revision": "r1", "entry": "pipeline.run"}
    )
    (workdir / "environment.json").write_bytes(env_descriptor)
    (workdir / "pipeline-code.json").write_bytes(code_descriptor)
    env_hash = sha256(env_descriptor)
    code_hash = sha256(code_descriptor)

    log = TransparencyLog(log_dir, trust=trust)
    log.submit_key_record(client_identity.record)

    register_goldens = []
    for artifact_id, digest, size in (
        (GOLDEN_ENVIRONMENT_ID, env_hash, len(env_descriptor)),
        (GOLDEN_CODE_IMAGE_ID, code_hash, len(code_descriptor)),
    ):
        golden = GoldenValue.issue(
            ArtifactMeasurement(
                artifact_id=artifact_id,
                role=ArtifactRole.METADATA,
                digest=digest,
                size_bytes=size,
            ),
            producer_identity,
        )
        log.submit_golden_value(golden)
        register_goldens.append(golden)
    trust.set_register_goldens(register_goldens)

    return DemoEnv(
        workdir=workdir,
        platform=platform,
        client_identity=client_identity,
        producer_identity=producer_identity,
        log=log,
        client=DirectLogClient(log),
        trust=trust,
        env_hash=env_hash,
        code_hash=code_hash,
    )


@dataclass
class ChainStage:
    name: str
    measurement: ArtifactMeasurement
    attestation: TransformationAttestation
    claim_digest: bytes
    artifact_path: Path | None = None


@dataclass
class ChainResult:
    stages: list[ChainStage]
    stage_names: list[str]
    monitored_run: TrainingRun | None = None

    @property
    def final(self) -> ChainStage:
        return self.stages[-1]

    def expectation(self, env: DemoEnv) -> Expectation:
        return Expectation(
            artifact_digest=self.final.measurement.digest,
            required_pipeline_code_hash=env.code_hash,
            required_stage_order=tuple(self.stage_names),
        )


def _minimal_metadata_hash(env: DemoEnv, stage_name: str) -> bytes:
    quote = env.platform.issue_quote(
        env.env_hash, env.code_hash, os.urandom(32), env.client_identity.record
    )
    metadata = PipelineMetadata(
        execution_name=stage_name,
        pipeline_spec={"stage": stage_name},
        events=(),
        system_quote=quote,
    )
    return sha256(metadata.canonical_bytes())


def attest_stage(
    env: DemoEnv,
    stage_name: str,
    inputs: Sequence[ArtifactMeasurement],
    outputs: Sequence[ArtifactMeasurement],
    precursors: Sequence[bytes],
) -> TransformationAttestation:
    """Build and sign a plain (unmonitored) stage attestation."""
    now = utc_now()
    operation = OperationRecord(
        name=stage_name,
        parameters_hash=sha256(canonical_json({"stage": stage_name})),
        started_at=now,
        ended_at=now,
    )
    client_quote = env.platform.issue_quote(
        env.env_hash, env.code_hash, os.urandom(32), env.client_identity.record
    )
    return TransformationAttestation(
        manifest_id=f"urn:atlas:manifest:{stage_name}-{os.urandom(6).hex()}",
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        operations=(operation,),
        precursor_hashes=tuple(precursors),
        pipeline_metadata_hash=_minimal_metadata_hash(env, stage_name),
        client_quote=client_quote,
        assertions=(),
    ).signed(env.client_identity)


def build_chain(
    env: DemoEnv,
    stage_names: Sequence[str] = DEMO_STAGE_NAMES,
    monitored_stage: str | None = DEMO_MONITORED_STAGE,
    seal_after: Sequence[str] = DEMO_SEAL_AFTER,
    seed: int = 42,
    artifact_size: int = 4096,
    tag: str = "demo",
    trainer_settings: TrainerSettings | None = None,
) -> ChainResult:
    """Run a linear pipeline chain, one attestation per stage, into the log.

    Every stage writes a deterministic artifact, publishes its golden value,
    and submits a signed attestation referencing its precursor. The stage
    named by ``monitored_stage`` runs the synthetic trainer under the full
    monitor (watcher + bridge + tracked config) instead of being synthesized.
    """
    artifacts_dir = env.workdir / f"artifacts-{tag}"
    artifacts_dir.mkdir(parents=True, exist_ok=True)

    stages: list[ChainStage] = []
    monitored_run: TrainingRun | None = None
    previous: ChainStage | None = None

    for index, stage_name in enumerate(stage_names):
        inputs = (previous.measurement,) if previous else ()
        precursors = (previous.claim_digest,) if previous else ()

        if stage_name == monitored_stage:
            run = run_synthetic_training(
                env.workdir / f"{tag}-{stage_name}",
                monitored=True,
                env=env,
                execution_name=stage_name,
                settings=trainer_settings,
                inputs=inputs,
                precursors=precursors,
                artifact_tag=f"{tag}:{stage_name}",
            )
            monitored_run = run
            assert run.manifest is not None
            for output in run.output_measurements:
                env.log.submit_golden_value(
                    GoldenValue.issue(output, env.producer_identity)
                )
            env.log.submit_attestation(run.manifest)
            stage = ChainStage(
                name=stage_name,
                measurement=run.output_measurements[-1],  # final weights feed the next stage
                attestation=run.manifest,
                claim_digest=run.manifest.claim_digest(),
            )
        else:
            path = artifacts_dir / f"stage-{index:02d}-{stage_name}.bin"
            path.write_bytes(deterministic_bytes(f"{tag}:{stage_name}", artifact_size, seed))
            role = ArtifactRole.DATASET if index < 4 else ArtifactRole.MODEL_WEIGHTS
            measurement = measure_file(
                path, role, f"urn:atlas:artifact:{tag}:{stage_name}"
            )
            env.log.submit_golden_value(GoldenValue.issue(measurement, env.producer_identity))
            attestation = attest_stage(
                env, stage_name, inputs, (measurement,), precursors
            )
            env.log.submit_attestation(attestation)
            stage = ChainStage(
                name=stage_name,
                measurement=measurement,
                attestation=attestation,
                claim_digest=attestation.claim_digest(),
                artifact_path=path,
            )

        stages.append(stage)
        previous = stage
        if stage_name in seal_after:
            env.log.seal_and_chain()

    return ChainResult(
        stages=stages, stage_names=list(stage_names), monitored_run=monitored_run
    )


def linear_stage_names(n: int) -> list[str]:
    return [f"stage-{i:03d}" for i in range(n)]


# ---------------------------------------------------------------------------
# Attack injection
# ---------------------------------------------------------------------------

class TamperingLogClient:
    """Log client that serves one attestation with mutated bytes.

    Models a compromised storage/transport path between the log and the
    verifier; proofs and roots stay honest, so mutations surface as proof or
    signature failures.
    """

    def __init__(
        self,
        inner: Any,
        target_claim_digest: bytes,
        mutator: Callable[[dict[str, Any]], dict[str, Any]],
    ):
        self.inner = inner
        self.target = target_claim_digest
        self.mutator = mutator

    def _tamper(self, fetched: FetchedEntry | None) -> FetchedEntry | None:
        if fetched is None or fetched.kind != ENTRY_ATTESTATION:
            return fetched
        body = dict(fetched.body)
        attestation = TransformationAttestation.from_dict(body)
        if attestation.claim_digest() != self.target:
            return fetched
        envelope = {"kind": ENTRY_ATTESTATION, "body": self.mutator(body)}
        return FetchedEntry(
            envelope=envelope,
            entry_bytes=canonical_json(envelope),
            tree_id=fetched.tree_id,
            leaf_index=fetched.leaf_index,
            proof=fetched.proof,
            signed_root=fetched.signed_root,
        )

    def get_entry(self, digest: bytes | str) -> FetchedEntry | None:
        return self._tamper(self.inner.get_entry(digest))

    def find_attestation_by_output(self, artifact_digest: bytes) -> FetchedEntry | None:
        return self._tamper(self.inner.find_attestation_by_output(artifact_digest))

    def __getattr__(self, name: str) -> Any:
        return getattr(self.inner, name)


def _flip_hex_digit(text: str, position: int) -> str:
    # position indexes into the hex part after the "sha256:" prefix
    prefix_len = len("sha256:")
    index = prefix_len + position
    old = text[index]
    new = "0" if old != "0" else "1"
    return text[:index] + new + text[index + 1:]


def _mutations(rng: random.Random) -> Callable[[dict[str, Any]], dict[str, Any]]:
    """Pick one field mutation to apply to an attestation body."""

    def mutate_manifest_id(body: dict[str, Any]) -> dict[str, Any]:
        return {**body, "manifest_id": body["manifest_id"] + "-tampered"}

    def mutate_output_digest(body: dict[str, Any]) -> dict[str, Any]:
        outputs = [dict(m) for m in body["outputs"]]
        victim = rng.randrange(len(outputs))
        outputs[victim]["digest"] = _flip_hex_digit(outputs[victim]["digest"], rng.randrange(64))
        return {**body, "outputs": outputs}

    def mutate_operation_name(body: dict[str, Any]) -> dict[str, Any]:
        operations = [dict(op) for op in body["operations"]]
        if not operations:
            return mutate_manifest_id(body)
        operations[0]["name"] = operations[0]["name"] + "-skipped"
        return {**body, "operations": operations}

    def mutate_precursors(body: dict[str, Any]) -> dict[str, Any]:
        precursors = list(body["precursor_hashes"])
        if precursors:
            precursors = precursors[:-1]  # drop a lineage link
        else:
            precursors = [digest_to_text(os.urandom(32))]
        return {**body, "precursor_hashes": precursors}

    def mutate_metadata_hash(body: dict[str, Any]) -> dict[str, Any]:
        return {
            **body,
            "pipeline_metadata_hash": _flip_hex_digit(
                body["pipeline_metadata_hash"], rng.randrange(64)
            ),
        }

    def mutate_signature(body: dict[str, Any]) -> dict[str, Any]:
        import base64

        signature = dict(body["signature"])
        raw = bytearray(base64.b64decode(signature["sig"][len("base64:"):]))
        raw[rng.randrange(len(raw))] ^= 0x01
        signature["sig"] = "base64:" + base64.b64encode(bytes(raw)).decode()
        return {**body, "signature": signature}

    return rng.choice(
        [
            mutate_manifest_id,
            mutate_output_digest,
            mutate_operation_name,
            mutate_precursors,
            mutate_metadata_hash,
            mutate_signature,
        ]
    )


@dataclass
class InjectionResult:
    attack: str
    expected_check: str
    report: VerificationReport
    detail: str = ""

    @property
    def detected(self) -> bool:
        return not self.report.ok and self.expected_check in self.report.failed_names()


def inject_artifact_flip(
    env: DemoEnv, chain: ChainResult, rng: random.Random
) -> InjectionResult:
    """Hub substitution: flip one byte of an artifact, re-verify it."""
    candidates = [s for s in chain.stages if s.artifact_path is not None]
    stage = rng.choice(candidates)
    data = bytearray(stage.artifact_path.read_bytes())
    data[rng.randrange(len(data))] ^= 1 << rng.randrange(8)
    tampered = measure(bytes(data), stage.measurement.artifact_id, stage.measurement.role)
    expectation = Expectation(artifact_digest=tampered.digest)
    verifier = Verifier(env.client, env.trust, cache=None)
    report = verifier.verify_artifact(expectation, measurement=tampered)
    return InjectionResult(
        attack="artifact-flip",
        expected_check="golden-value",
        report=report,
        detail=f"stage {stage.name}",
    )


def inject_attestation_mutation(
    env: DemoEnv, chain: ChainResult, rng: random.Random
) -> InjectionResult:
    """MLaaS tamper: mutate one served attestation field, verify the chain head."""
    stage = rng.choice(chain.stages)
    mutator = _mutations(rng)
    client = TamperingLogClient(env.client, stage.claim_digest, mutator)
    verifier = Verifier(client, env.trust, cache=None)
    report = verifier.verify_artifact(
        chain.expectation(env), measurement=chain.final.measurement
    )
    return InjectionResult(
        attack="attestation-mutation",
        expected_check="inclusion-proof",
        report=report,
        detail=f"stage {stage.name}, {mutator.__name__}",
    )


def inject_stage_attack(
    rng: random.Random, scratch_dir: str | Path, n_stages: int = 6
) -> InjectionResult:
    """Lineage attack: run a pipeline with a stage omitted or swapped."""
    names = [f"step-{i}" for i in range(n_stages)]
    mode = rng.choice(("omit", "swap"))
    if mode == "omit":
        victim = rng.randrange(1, n_stages - 1)
        executed = names[:victim] + names[victim + 1:]
    else:
        victim = rng.randrange(1, n_stages - 1)
        executed = list(names)
        executed[victim], executed[victim - 1] = executed[victim - 1], executed[victim]

    tag = f"attack-{os.urandom(4).hex()}"
    env = provision(Path(scratch_dir) / tag, log_dir=None)
    chain = build_chain(
        env,
        stage_names=executed,
        monitored_stage=None,
        seal_after=(),
        tag=tag,
        artifact_size=256,
    )
    expectation = Expectation(
        artifact_digest=chain.final.measurement.digest,
        required_stage_order=tuple(names),
    )
    verifier = Verifier(env.client, env.trust, cache=None)
    report = verifier.verify_artifact(expectation, measurement=chain.final.measurement)
    return InjectionResult(
        attack=f"stage-{mode}",
        expected_check="stage-order",
        report=report,
        detail=f"{mode} {names[victim]}",
    )


def run_injection_suite(
    env: DemoEnv, chain: ChainResult, count: int, seed: int = 7
) -> list[InjectionResult]:
    """Randomized attack drills across the three detection classes."""
    rng = random.Random(seed)
    scratch = env.workdir / "attack-scratch"
    results: list[InjectionResult] = []
    injectors = ("artifact", "attestation", "stage")
    for _ in range(count):
        kind = injectors[rng.randrange(len(injectors))]
        if kind == "artifact":
            results.append(inject_artifact_flip(env, chain, rng))
        elif kind == "attestation":
            results.append(inject_attestation_mutation(env, chain, rng))
        else:
            results.append(inject_stage_attack(rng, scratch))
    return results


# ---------------------------------------------------------------------------
# Demo scenario
# ---------------------------------------------------------------------------

def run_demo(
    workdir: str | Path,
    stage_count: int = 20,
    injections: int = 3,
    seed: int = 42,
    log_dir: str | Path | None = None,
    emit: Callable[[str], None] = print,
) -> int:
    """Provision, run the monitored pipeline chain, verify, inject attacks.

    Returns a process exit code: 0 when the chain verifies and every
    injected attack is detected.
    """
    workdir = Path(workdir)
    emit(f"[1/6] provisioning platform, identities, and log under {workdir}")
    env = provision(workdir, log_dir=log_dir)
    emit(f"      platform key {env.platform.key_id[:16]}…, log key {env.log.identity.key_id[:16]}…")

    if stage_count == 20:
        stage_names: Sequence[str] = DEMO_STAGE_NAMES
        monitored = DEMO_MONITORED_STAGE
        seal_after: Sequence[str] = DEMO_SEAL_AFTER
    else:
        stage_names = linear_stage_names(stage_count)
        monitored = None
        seal_after = ()

    emit(f"[2/6] data preparation + [4/6] training: building {len(stage_names)}-stage chain")
    chain = build_chain(env, stage_names, monitored, seal_after, seed=seed)
    emit(f"      {len(chain.stages)} attestations over {env.log.tree_count} chained tree(s)")
    if chain.monitored_run is not None:
        run = chain.monitored_run
        manifest_size = len(run.manifest.canonical_bytes()) if run.manifest else 0
        emit(
            f"[3/6] environment validated (system quote accepted); "
            f"monitored stage captured {run.acked_events} bridge events"
        )
        emit(f"      manifest size: {manifest_size} bytes for a {run.recorder.event_count}-event run")

    emit("[5/6] verification: full lineage walk")
    cache = VerificationCache()
    verifier = Verifier(env.client, env.trust, cache)
    report = verifier.verify_artifact(
        chain.expectation(env), measurement=chain.final.measurement
    )
    emit(
        f"      verdict={report.verdict} chain_length={report.chain_length} "
        f"checks={len(report.checks)} elapsed={report.elapsed * 1000:.1f} ms"
    )
    if not report.ok:
        for check in report.failed_checks():
            emit(f"      FAILED {check.name}: {check.detail}")
        return 1

    emit("[6/6] deployment: lineage summary")
    for stage in chain.stages:
        emit(
            f"      {stage.name:<18} {digest_to_text(stage.measurement.digest)[:26]}… "
            f"claim {stage.claim_digest.hex()[:12]}…"
        )

    ok = True
    if injections > 0:
        emit(f"attack drills ({injections} injections):")
        results = run_injection_suite(env, chain, injections, seed=seed)
        detected = sum(1 for r in results if r.detected)
        for result in results[:10]:
            status = "detected" if result.detected else "MISSED"
            emit(
                f"      {result.attack:<22} {status} via {result.expected_check} ({result.detail})"
            )
        if len(results) > 10:
            emit(f"      … {len(results) - 10} more")
        emit(f"      detection rate: {detected}/{len(results)}")
        ok = detected == len(results)

    emit("demo complete" if ok else "demo FAILED")
    return 0 if ok else 1
