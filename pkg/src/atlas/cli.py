"""Single `atlas` binary wiring the workflow together.

Exit codes: 0 success, 1 verification or admission failure, 2 usage error,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from atlas.attest import AttestationError, Identity, TeePlatform, load_public_key, verify_quote
from atlas.canonical import (
    canonical_json,
    decode_json,
    digest_from_text,
    parse_timestamp,
    sha256,
    utc_now,
)
from atlas.log import (
    AdmissionError,
    ENTRY_ATTESTATION,
    LogUnavailable,
    TransparencyLog,
    TrustStore,
)
from atlas.model import (
    ArtifactRole,
    MeasurementError,
    ModelError,
    MonitorEvent,
    measure_file,
)
from atlas.monitor import (
    BridgeServer,
    CheckpointWatcher,
    ManifestCache,
    PipelineRecorder,
    finalize_pipeline,
)
from atlas.pipeline import run_demo
from atlas.service import HttpLogClient, serve_log
from atlas.verifier import Expectation, VerificationCache, Verifier, audit_chain

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


@dataclass
class CliConfig:
    """Paths and endpoints shared across subcommands, validated at startup."""

    log_url: str | None = None
    log_dir: str | None = None
    socket_path: str | None = None
    platform_key_path: str | None = None
    identity_path: str | None = None
    checkpoint_dir: str | None = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "CliConfig":
        return cls(
            log_url=getattr(args, "log", None) or os.environ.get("ATLAS_LOG_URL"),
            log_dir=getattr(args, "log_dir", None),
            socket_path=getattr(args, "socket", None),
            platform_key_path=getattr(args, "platform_key", None),
            identity_path=getattr(args, "identity", None),
            checkpoint_dir=getattr(args, "dir", None),
        )

    def validate(self) -> None:
        """Reject unusable paths before any work starts (usage error, exit 2)."""
        if self.checkpoint_dir is not None and not Path(self.checkpoint_dir).is_dir():
            print(f"error: checkpoint dir {self.checkpoint_dir} does not exist", file=sys.stderr)
            raise SystemExit(EXIT_USAGE)
        if self.platform_key_path is not None and not Path(self.platform_key_path).is_file():
            print(f"error: platform key {self.platform_key_path} does not exist", file=sys.stderr)
            raise SystemExit(EXIT_USAGE)


def _print(tree: Any, as_json: bool, text: str) -> None:
    if as_json:
        print(canonical_json(tree).decode())
    else:
        print(text)


def _load_identity(path: str, created_inside_tee: bool = True) -> Identity:
    p = Path(path)
    if p.exists():
        return Identity.load(p, created_inside_tee)
    identity = Identity.generate(created_inside_tee)
    identity.save(p)
    return identity


def _hash_of_file(path: str | None) -> bytes:
    if path is None:
        return bytes(32)
    return sha256(Path(path).read_bytes())


def _parse_artifact_spec(spec: str) -> tuple[ArtifactRole, str, Path]:
    """ROLE:ID=PATH, e.g. dataset:urn:example:train=data/train.jsonl"""
    head, _, path = spec.partition("=")
    role, _, artifact_id = head.partition(":")
    if not path or not artifact_id:
        raise argparse.ArgumentTypeError(f"expected ROLE:ID=PATH, got {spec!r}")
    return ArtifactRole(role), artifact_id, Path(path)


def _build_trust(args: argparse.Namespace) -> TrustStore:
    trust = TrustStore()
    if getattr(args, "platform_key", None):
        key = load_public_key(args.platform_key)
        trust.add_platform_key(sha256(key).hex(), key)
    for pem in getattr(args, "producer_key", None) or []:
        key = load_public_key(pem)
        trust.add_producer_key(sha256(key).hex(), key)
    if getattr(args, "log_key", None):
        key = load_public_key(args.log_key)
        trust.add_log_key(sha256(key).hex(), key)
    return trust


def _log_url(args: argparse.Namespace) -> str:
    config = CliConfig.from_args(args)
    config.validate()
    if not config.log_url:
        print("error: no log URL (use --log or ATLAS_LOG_URL)", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return config.log_url


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_measure(args: argparse.Namespace) -> int:
    try:
        measurement = measure_file(args.file, args.role, args.artifact_id)
    except MeasurementError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    _print(
        measurement.to_dict(),
        args.format == "json",
        f"sha256:{measurement.digest_hex}  {measurement.size_bytes}  {measurement.artifact_id}",
    )
    return EXIT_OK


def cmd_attest(args: argparse.Namespace) -> int:
    try:
        identity = _load_identity(args.identity)
        platform = TeePlatform(_load_identity(args.platform_identity, created_inside_tee=False))
        env_hash = _hash_of_file(args.env_file)
        code_hash = _hash_of_file(args.code_file)
        spec = decode_json(Path(args.spec).read_bytes()) if args.spec else {}

        recorder = PipelineRecorder(
            execution_name=args.execution_name,
            pipeline_spec=spec,
            env_hash=env_hash,
            code_hash=code_hash,
        )
        nonce = os.urandom(32)
        quote = platform.issue_quote(env_hash, code_hash, nonce, identity.record)
        verdict = verify_quote(
            quote, [env_hash, code_hash], nonce, {platform.key_id: platform.public_key}
        )
        recorder.attach_system_quote(quote, verdict)

        if args.events:
            for line in Path(args.events).read_bytes().splitlines():
                if not line.strip():
                    continue
                frame = decode_json(line)
                payload = {k: v for k, v in frame.items() if k not in ("type", "timestamp")}
                timestamp = (
                    parse_timestamp(frame["timestamp"]) if "timestamp" in frame else utc_now()
                )
                recorder.record(
                    MonitorEvent(kind=frame["type"], timestamp=timestamp, payload=payload),
                    source="import",
                )

        inputs = [measure_file(p, role, aid) for role, aid, p in args.input or []]
        outputs = [measure_file(p, role, aid) for role, aid, p in args.output or []]
        precursors = [digest_from_text(d) for d in args.precursor or []]
        cache = ManifestCache(args.cache_dir) if args.cache_dir else None

        attestation = finalize_pipeline(
            recorder, inputs, outputs, precursors, identity, platform, cache
        )
        attestation.save(args.out)
    except (MeasurementError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(
        f"wrote {args.out} claim sha256:{attestation.claim_digest().hex()} "
        f"({len(attestation.canonical_bytes())} bytes)"
    )
    return EXIT_OK


def cmd_submit(args: argparse.Namespace) -> int:
    client = HttpLogClient(_log_url(args))
    try:
        manifest = decode_json(Path(args.manifest).read_bytes())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        result = client.submit(ENTRY_ATTESTATION, manifest)
    except LogUnavailable as exc:
        print(f"error: log unreachable: {exc}", file=sys.stderr)
        return EXIT_IO
    except AdmissionError as exc:
        print(f"rejected: {exc.reason}: {exc.detail}", file=sys.stderr)
        return EXIT_FAILED
    _print(
        result,
        args.format == "json",
        f"admitted tree={result['tree_id']} index={result['leaf_index']} "
        f"root={result['signed_root']['root']}",
    )
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    client = HttpLogClient(_log_url(args))  # validates paths and URL first
    trust = _build_trust(args)
    try:
        measurement = measure_file(args.artifact, args.role, args.artifact_id)
    except MeasurementError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    expect_tree: dict[str, Any] = {}
    if args.expect:
        expect_tree = decode_json(Path(args.expect).read_bytes())
    expect_tree.setdefault("artifact_digest", "sha256:" + measurement.digest_hex)
    expectation = Expectation.from_dict(expect_tree)

    verifier = Verifier(client, trust, VerificationCache())
    report = verifier.verify_artifact(expectation, measurement=measurement)
    if args.format == "json":
        print(canonical_json(report.to_dict()).decode())
    else:
        for check in report.checks:
            flag = "ok " if check.ok else "FAIL"
            suffix = f"  ({check.detail})" if check.detail else ""
            print(f"  [{flag}] {check.name}{suffix}")
        print(
            f"verdict: {report.verdict}  chain_length={report.chain_length}  "
            f"elapsed={report.elapsed * 1000:.1f} ms"
        )
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_audit(args: argparse.Namespace) -> int:
    client = HttpLogClient(_log_url(args))  # validates paths and URL first
    trust = _build_trust(args)
    try:
        report = audit_chain(client, trust)
    except LogUnavailable as exc:
        print(f"error: log unreachable: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.format == "json":
        print(canonical_json(report.to_dict()).decode())
    else:
        for check in report.checks:
            flag = "ok " if check.ok else "FAIL"
            suffix = f"  ({check.detail})" if check.detail else ""
            print(f"  [{flag}] {check.name}{suffix}")
        print(f"chain of {report.tree_count} tree(s): {'consistent' if report.ok else 'BROKEN'}")
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_monitor(args: argparse.Namespace) -> int:
    config = CliConfig.from_args(args)
    config.validate()
    try:
        identity = _load_identity(args.identity)
        platform = TeePlatform(_load_identity(args.platform_identity, created_inside_tee=False))
        env_hash = _hash_of_file(args.env_file)
        code_hash = _hash_of_file(args.code_file)
        spec = decode_json(Path(args.spec).read_bytes()) if args.spec else {}

        recorder = PipelineRecorder(
            execution_name=args.execution_name,
            pipeline_spec=spec,
            env_hash=env_hash,
            code_hash=code_hash,
        )
        nonce = os.urandom(32)
        quote = platform.issue_quote(env_hash, code_hash, nonce, identity.record)
        verdict = verify_quote(
            quote, [env_hash, code_hash], nonce, {platform.key_id: platform.public_key}
        )
        recorder.attach_system_quote(quote, verdict)

        watcher = CheckpointWatcher(config.checkpoint_dir, recorder.sink("watcher")).start()
        bridge = BridgeServer(config.socket_path, recorder, watcher).start()
    except (OSError, AttestationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    print(
        f"monitoring {config.checkpoint_dir}; bridge at {config.socket_path} "
        "(finalize frame ends the run)"
    )
    try:
        while not bridge.finalize_requested.wait(timeout=0.2):
            pass
    except KeyboardInterrupt:
        print("interrupted; finalizing")
    watcher.wait_settled()
    bridge.stop()
    watcher.stop()

    inputs = [measure_file(p, role, aid) for role, aid, p in args.input or []]
    outputs = [
        measure_file(
            path,
            ArtifactRole.CHECKPOINT,
            f"urn:atlas:artifact:{args.execution_name}:{Path(path).name}",
        )
        for path in sorted(watcher.tracked_digests())
    ]
    for role, aid, p in args.output or []:
        outputs.append(measure_file(p, role, aid))
    if not outputs:
        print("error: no checkpoints observed and no --output given", file=sys.stderr)
        return EXIT_FAILED
    precursors = [digest_from_text(d) for d in args.precursor or []]
    cache = ManifestCache(args.cache_dir) if args.cache_dir else None

    attestation = finalize_pipeline(
        recorder, inputs, outputs, precursors, identity, platform, cache
    )
    attestation.save(args.out)
    print(
        f"wrote {args.out}: {recorder.event_count} events, "
        f"{bridge.acked_events} acked frames, claim sha256:{attestation.claim_digest().hex()}"
    )
    return EXIT_OK


def cmd_serve_log(args: argparse.Namespace) -> int:
    config = CliConfig.from_args(args)
    config.validate()
    trust = _build_trust(args)
    try:
        log = TransparencyLog(config.log_dir, trust=trust)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    server = serve_log(log, args.host, args.port)
    print(f"transparency log at {server.url} (log key {log.identity.key_id[:16]}…)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def cmd_demo(args: argparse.Namespace) -> int:
    import tempfile

    workdir = args.workdir or tempfile.mkdtemp(prefix="atlas-demo-")
    started = time.perf_counter()
    code = run_demo(
        workdir,
        stage_count=args.artifacts,
        injections=args.injections,
        seed=args.seed,
        log_dir=args.log_dir,
    )
    print(f"total {time.perf_counter() - started:.1f}s")
    return code


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlas",
        description="Attestable pipeline provenance: measure, attest, log, verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("measure", help="measure an artifact file")
    p.add_argument("file")
    p.add_argument("--artifact-id", default=None)
    p.add_argument("--role", default="dataset", choices=[r.value for r in ArtifactRole])
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("attest", help="assemble and sign a transformation manifest")
    p.add_argument("--execution-name", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--identity", required=True, help="client signing key PEM (created if absent)")
    p.add_argument("--platform-identity", required=True, help="simulated TEE root key PEM")
    p.add_argument("--spec", help="pipeline spec JSON file")
    p.add_argument("--events", help="JSONL event frames to embed")
    p.add_argument("--input", action="append", type=_parse_artifact_spec, metavar="ROLE:ID=PATH")
    p.add_argument("--output", action="append", type=_parse_artifact_spec, metavar="ROLE:ID=PATH")
    p.add_argument("--precursor", action="append", metavar="sha256:HEX")
    p.add_argument("--env-file")
    p.add_argument("--code-file")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_attest)

    p = sub.add_parser("submit", help="submit a manifest to the transparency log")
    p.add_argument("manifest")
    p.add_argument("--log", help="log URL (or ATLAS_LOG_URL)")
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("verify", help="verify an artifact's integrity and lineage")
    p.add_argument("--artifact", required=True)
    p.add_argument("--artifact-id", default=None)
    p.add_argument("--role", default="model-weights", choices=[r.value for r in ArtifactRole])
    p.add_argument("--expect", help="expectation JSON file")
    p.add_argument("--log", help="log URL (or ATLAS_LOG_URL)")
    p.add_argument("--platform-key", help="platform public key PEM")
    p.add_argument("--producer-key", action="append", help="producer public key PEM")
    p.add_argument("--log-key", help="log public key PEM")
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("audit", help="walk and check the log's tree chain")
    p.add_argument("--log", help="log URL (or ATLAS_LOG_URL)")
    p.add_argument("--log-key", help="log public key PEM")
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("monitor", help="watch checkpoints and serve the event bridge")
    p.add_argument("--dir", required=True, help="checkpoint directory to watch")
    p.add_argument("--socket", required=True, help="bridge socket path")
    p.add_argument("--out", required=True, help="manifest output path")
    p.add_argument("--execution-name", default="training-run")
    p.add_argument("--identity", default="atlas-identity.pem")
    p.add_argument("--platform-identity", default="atlas-platform.pem")
    p.add_argument("--spec")
    p.add_argument("--input", action="append", type=_parse_artifact_spec, metavar="ROLE:ID=PATH")
    p.add_argument("--output", action="append", type=_parse_artifact_spec, metavar="ROLE:ID=PATH")
    p.add_argument("--precursor", action="append", metavar="sha256:HEX")
    p.add_argument("--env-file")
    p.add_argument("--code-file")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("serve-log", help="run the transparency log service")
    p.add_argument("--log-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    p.add_argument("--platform-key", help="platform public key PEM")
    p.add_argument("--producer-key", action="append", help="producer public key PEM")
    p.set_defaults(func=cmd_serve_log)

    p = sub.add_parser("demo", help="run the end-to-end scenario with attack drills")
    p.add_argument("--workdir")
    p.add_argument("--artifacts", type=int, default=20)
    p.add_argument("--injections", type=int, default=3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--log-dir")
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AdmissionError as exc:
        print(f"rejected: {exc.reason}: {exc.detail}", file=sys.stderr)
        return EXIT_FAILED
    except LogUnavailable as exc:
        print(f"error: log unreachable: {exc}", file=sys.stderr)
        return EXIT_IO
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MeasurementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
