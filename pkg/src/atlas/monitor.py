"""Runtime pipeline observers feeding a manifest: watcher, config, bridge.

Three producers push MonitorEvents into one recorder: a checkpoint watcher
that digests files and reports only real content changes, a tracked
configuration wrapper that versions every mutation, and a local stream
socket bridge accepting newline-delimited JSON frames from the training
process. `finalize_pipeline` drains them into a signed transformation
attestation, spilling event bodies into a local manifest cache and keeping
only their hashes in the manifest itself.
"""

from __future__ import annotations

import os
import socket
import threading
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from atlas.attest import Identity, TeePlatform, TeeQuote, QuoteVerdict
from atlas.canonical import (
    CanonicalEncodingError,
    canonical_json,
    decode_json,
    digest_to_text,
    ensure_utc_ms,
    format_timestamp,
    parse_timestamp,
    sha256,
    utc_now,
)
from atlas.model import (
    ArtifactMeasurement,
    EventKind,
    EventSchemaError,
    ManifestAssertion,
    MonitorEvent,
    OperationRecord,
    PipelineMetadata,
    TransformationAttestation,
    new_manifest_id,
)

DEFAULT_CHECKPOINT_EXTENSIONS = (".pt", ".ckpt", ".safetensors")

# Control frame types understood by the bridge in addition to event kinds.
CONTROL_SCAN = "scan_checkpoints"
CONTROL_FINALIZE = "finalize"

# Event payloads whose canonical form exceeds this spill into the manifest
# cache; the metadata keeps a body_ref instead.
INLINE_PAYLOAD_LIMIT = 1024


class MonitorError(Exception):
    pass


class AttestationRefused(MonitorError):
    """finalize_pipeline called before the system quote was verified."""


# ---------------------------------------------------------------------------
# Recorder: the single ordered event queue all producers feed
# ---------------------------------------------------------------------------

class PipelineRecorder:
    """Collects events from all monitors for one pipeline execution."""

    def __init__(
        self,
        execution_name: str,
        pipeline_spec: Mapping[str, Any] | None = None,
        env_hash: bytes | None = None,
        code_hash: bytes | None = None,
    ):
        self.execution_name = execution_name
        self.pipeline_spec = dict(pipeline_spec or {})
        self.env_hash = env_hash if env_hash is not None else bytes(32)
        self.code_hash = code_hash if code_hash is not None else bytes(32)
        self.started_at = utc_now()
        self.system_quote: TeeQuote | None = None
        self.quote_verified = False
        self._events: list[tuple[datetime, int, str, MonitorEvent]] = []
        self._seq = 0
        self._lock = threading.Lock()

    def record(self, event: MonitorEvent, source: str) -> None:
        with self._lock:
            self._events.append((event.timestamp, self._seq, source, event))
            self._seq += 1

    def sink(self, source: str) -> Callable[[MonitorEvent], None]:
        return lambda event: self.record(event, source)

    def attach_system_quote(self, quote: TeeQuote, verdict: QuoteVerdict) -> None:
        """Store the ML system's quote; attestations require an accepted verdict."""
        self.system_quote = quote
        self.quote_verified = verdict.accepted

    def events_sorted(self) -> list[tuple[str, MonitorEvent]]:
        with self._lock:
            snapshot = sorted(self._events, key=lambda item: (item[0], item[1]))
        return [(source, event) for _, _, source, event in snapshot]

    @property
    def event_count(self) -> int:
        with self._lock:
            return len(self._events)


# ---------------------------------------------------------------------------
# Checkpoint watcher
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckpointRecord:
    """Tracked state of one checkpoint file."""

    path: str
    digest: bytes
    observed_at: datetime
    change: str  # "created" | "modified"
    previous_digest: bytes | None = None

    def __post_init__(self) -> None:
        if self.change not in ("created", "modified"):
            raise MonitorError(f"invalid change kind {self.change!r}")
        if self.change == "modified":
            if self.previous_digest is None or self.previous_digest == self.digest:
                raise MonitorError("modified record needs a differing previous digest")
        object.__setattr__(self, "observed_at", ensure_utc_ms(self.observed_at))

    def event_payload(self) -> dict[str, Any]:
        payload = {"path": self.path, "digest": digest_to_text(self.digest)}
        if self.change == "modified":
            payload["previous_digest"] = digest_to_text(self.previous_digest)
        return payload


def _file_digest(path: Path) -> bytes:
    import hashlib

    hasher = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(64 * 1024), b""):
            hasher.update(chunk)
    return hasher.digest()


class CheckpointWatcher:
    """Polling watcher over a checkpoint directory.

    The initial scan registers pre-existing checkpoints with created events.
    Afterwards a change is only reported once the file has been quiet for the
    debounce window and its recomputed digest actually differs.
    """

    def __init__(
        self,
        directory: str | Path,
        sink: Callable[[MonitorEvent], None],
        extensions: Sequence[str] = DEFAULT_CHECKPOINT_EXTENSIONS,
        poll_interval: float = 0.05,
        debounce: float = 0.2,
    ):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise MonitorError(f"watch directory does not exist: {directory}")
        self.sink = sink
        self.extensions = tuple(extensions)
        self.poll_interval = poll_interval
        self.debounce = debounce
        self._records: dict[str, CheckpointRecord] = {}
        self._stats: dict[str, tuple[int, int]] = {}
        self._pending: dict[str, float] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # -- lifecycle --------------------------------------------------------

    def start(self) -> "CheckpointWatcher":
        self.scan()
        self._thread = threading.Thread(target=self._run, name="checkpoint-watcher", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def _run(self) -> None:
        while not self._stop.wait(self.poll_interval):
            try:
                self._tick()
            except Exception:
                # the watcher must survive transient filesystem races
                continue

    # -- scanning ---------------------------------------------------------

    def _is_checkpoint(self, path: Path) -> bool:
        return path.is_file() and path.suffix in self.extensions

    def _list(self) -> list[Path]:
        try:
            return sorted(p for p in self.directory.iterdir() if self._is_checkpoint(p))
        except OSError:
            return []

    def scan(self) -> None:
        """Full pass: digest every checkpoint and emit events for changes."""
        with self._lock:
            for path in self._list():
                self._examine(path)

    def _tick(self) -> None:
        now = time.monotonic()
        with self._lock:
            for path in self._list():
                key = str(path)
                try:
                    stat = path.stat()
                except OSError:
                    continue
                sig = (stat.st_mtime_ns, stat.st_size)
                if self._stats.get(key) != sig:
                    self._stats[key] = sig
                    self._pending[key] = now
            ready = [
                key
                for key, since in self._pending.items()
                if now - since >= self.debounce
            ]
            for key in ready:
                del self._pending[key]
                self._examine(Path(key))

    def _event_path(self, path: Path) -> str:
        # manifests carry the path relative to the watched directory so the
        # same run produces byte-identical metadata anywhere on disk
        try:
            return str(path.relative_to(self.directory))
        except ValueError:
            return str(path)

    def _examine(self, path: Path) -> None:
        key = str(path)
        try:
            stat = path.stat()
            digest = _file_digest(path)
        except OSError as exc:
            kind = (
                EventKind.CHECKPOINT_MODIFIED
                if key in self._records
                else EventKind.CHECKPOINT_CREATED
            )
            self.sink(
                MonitorEvent(
                    kind=kind,
                    timestamp=utc_now(),
                    payload={"path": self._event_path(path), "error": str(exc)},
                )
            )
            return
        self._stats[key] = (stat.st_mtime_ns, stat.st_size)
        previous = self._records.get(key)
        if previous is None:
            record = CheckpointRecord(
                path=self._event_path(path),
                digest=digest,
                observed_at=utc_now(),
                change="created",
            )
        elif previous.digest != digest:
            record = CheckpointRecord(
                path=self._event_path(path),
                digest=digest,
                observed_at=utc_now(),
                change="modified",
                previous_digest=previous.digest,
            )
        else:
            return  # identical bytes: no event
        self._records[key] = record
        self.sink(
            MonitorEvent(
                kind=(
                    EventKind.CHECKPOINT_CREATED
                    if record.change == "created"
                    else EventKind.CHECKPOINT_MODIFIED
                ),
                timestamp=record.observed_at,
                payload=record.event_payload(),
            )
        )

    # -- inspection --------------------------------------------------------

    def tracked_digests(self) -> dict[str, bytes]:
        with self._lock:
            return {path: record.digest for path, record in self._records.items()}

    def records(self) -> dict[str, CheckpointRecord]:
        with self._lock:
            return dict(self._records)

    def wait_settled(self, timeout: float = 5.0) -> bool:
        """Block until no dirty files remain and one clean poll has run."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                pending = bool(self._pending)
            if not pending:
                time.sleep(self.poll_interval * 2)
                with self._lock:
                    if not self._pending:
                        return True
            time.sleep(self.poll_interval)
        return False


def watch_checkpoints(
    directory: str | Path,
    sink: Callable[[MonitorEvent], None],
    **kwargs: Any,
) -> CheckpointWatcher:
    return CheckpointWatcher(directory, sink, **kwargs).start()


# ---------------------------------------------------------------------------
# Tracked configuration
# ---------------------------------------------------------------------------

class TrackedConfig:
    """Key-value configuration that versions and reports every access."""

    def __init__(
        self,
        entries: Mapping[str, Any] | None = None,
        sink: Callable[[MonitorEvent], None] | None = None,
    ):
        self._entries: dict[str, Any] = dict(entries or {})
        self._initial: dict[str, Any] = dict(self._entries)
        self._sink = sink or (lambda event: None)
        self._version = 0
        self._lock = threading.Lock()
        self._state_hash = sha256(canonical_json(self._entries))

    @property
    def version(self) -> int:
        return self._version

    @property
    def state_hash(self) -> bytes:
        return self._state_hash

    @property
    def initial_entries(self) -> dict[str, Any]:
        return dict(self._initial)

    def entries(self) -> dict[str, Any]:
        with self._lock:
            return dict(self._entries)

    def get(self, key: str) -> Any:
        with self._lock:
            found = key in self._entries
            value = self._entries.get(key)
        self._sink(
            MonitorEvent(
                kind=EventKind.CONFIG_ACCESS,
                timestamp=utc_now(),
                payload={"key": key, "found": found},
            )
        )
        return value

    def set(self, key: str, value: Any) -> None:
        with self._lock:
            old = self._entries.get(key)
            self._entries[key] = value
            self._version += 1
            self._state_hash = sha256(canonical_json(self._entries))
            version = self._version
        self._sink(
            MonitorEvent(
                kind=EventKind.CONFIG_UPDATE,
                timestamp=utc_now(),
                payload={"key": key, "old": old, "new": value, "version": version},
            )
        )


def replay_config_updates(
    initial: Mapping[str, Any], events: Iterable[MonitorEvent]
) -> tuple[dict[str, Any], bytes, int]:
    """Rebuild final entries and state hash from config_update events."""
    entries = dict(initial)
    version = 0
    for event in events:
        if event.kind is not EventKind.CONFIG_UPDATE:
            continue
        entries[event.payload["key"]] = event.payload["new"]
        version = event.payload["version"]
    return entries, sha256(canonical_json(entries)), version


# ---------------------------------------------------------------------------
# Bridge service
# ---------------------------------------------------------------------------

_BRIDGE_EVENT_KINDS = {kind.value for kind in EventKind}


class BridgeServer:
    """Local stream-socket sink for events from the training process.

    One UTF-8 JSON object per line; each frame is ACKed ``{"ok":true}`` or
    NACKed with a reason, and a malformed frame never drops the connection.
    """

    def __init__(
        self,
        socket_path: str | Path,
        recorder: PipelineRecorder,
        watcher: CheckpointWatcher | None = None,
    ):
        self.socket_path = str(socket_path)
        self.recorder = recorder
        self.watcher = watcher
        self.acked_events = 0
        self.nacked_frames = 0
        self.finalize_requested = threading.Event()
        self._lock = threading.Lock()
        self._server: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self) -> "BridgeServer":
        if os.path.exists(self.socket_path):
            os.unlink(self.socket_path)
        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        server.bind(self.socket_path)
        server.listen(16)
        server.settimeout(0.2)
        self._server = server
        acceptor = threading.Thread(target=self._accept_loop, name="bridge-acceptor", daemon=True)
        acceptor.start()
        self._threads.append(acceptor)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.close()
        for thread in list(self._threads):
            thread.join(timeout=5.0)
        if os.path.exists(self.socket_path):
            os.unlink(self.socket_path)

    def _accept_loop(self) -> None:
        assert self._server is not None
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            thread = threading.Thread(
                target=self._serve_connection, args=(conn,), daemon=True
            )
            thread.start()
            self._threads.append(thread)

    def _serve_connection(self, conn: socket.socket) -> None:
        buffer = b""
        with conn:
            conn.settimeout(0.2)
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(64 * 1024)
                except socket.timeout:
                    continue
                except OSError:
                    return
                if not chunk:
                    return
                buffer += chunk
                while b"\n" in buffer:
                    line, buffer = buffer.split(b"\n", 1)
                    if not line.strip():
                        continue
                    response = self._handle_frame(line)
                    try:
                        conn.sendall(canonical_json(response) + b"\n")
                    except OSError:
                        return

    def _nack(self, reason: str) -> dict[str, Any]:
        with self._lock:
            self.nacked_frames += 1
        return {"ok": False, "reason": reason}

    def _handle_frame(self, line: bytes) -> dict[str, Any]:
        try:
            frame = decode_json(line)
        except Exception:
            return self._nack("bad-json")
        if not isinstance(frame, dict) or not isinstance(frame.get("type"), str):
            return self._nack("bad-frame")
        frame_type = frame["type"]
        if frame_type == CONTROL_SCAN:
            if self.watcher is not None:
                self.watcher.scan()
            return {"ok": True}
        if frame_type == CONTROL_FINALIZE:
            self.finalize_requested.set()
            return {"ok": True}
        if frame_type not in _BRIDGE_EVENT_KINDS:
            return self._nack("unknown-type")
        payload = {k: v for k, v in frame.items() if k not in ("type", "timestamp")}
        timestamp_text = frame.get("timestamp")
        try:
            timestamp = (
                parse_timestamp(timestamp_text) if timestamp_text is not None else utc_now()
            )
        except Exception:
            return self._nack("bad-timestamp")
        try:
            event = MonitorEvent(
                kind=EventKind(frame_type), timestamp=timestamp, payload=payload
            )
            event.canonical_bytes()  # reject unencodable payloads up front
        except EventSchemaError:
            return self._nack("schema")
        except CanonicalEncodingError:
            return self._nack("encoding")
        with self._lock:
            self.recorder.record(event, source="bridge")
            self.acked_events += 1
        return {"ok": True}


def bridge_serve(
    socket_path: str | Path,
    recorder: PipelineRecorder,
    watcher: CheckpointWatcher | None = None,
) -> BridgeServer:
    return BridgeServer(socket_path, recorder, watcher).start()


class FrameSender:
    """Minimal bridge client: send one frame, wait for the one-line reply."""

    def __init__(self, socket_path: str | Path, timeout: float = 5.0):
        self.socket_path = str(socket_path)
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.settimeout(timeout)
        try:
            self._sock.connect(self.socket_path)
        except OSError as exc:
            raise MonitorError(f"cannot reach bridge at {self.socket_path}: {exc}") from exc
        self._reader = self._sock.makefile("rb")

    def send(self, frame: Mapping[str, Any]) -> dict[str, Any]:
        self._sock.sendall(canonical_json(dict(frame)) + b"\n")
        line = self._reader.readline()
        if not line:
            raise MonitorError("bridge closed the connection")
        return decode_json(line)

    def emit(self, kind: str, **payload: Any) -> dict[str, Any]:
        frame = {"type": kind, "timestamp": format_timestamp(utc_now()), **payload}
        return self.send(frame)

    def close(self) -> None:
        try:
            self._reader.close()
        finally:
            self._sock.close()

    def __enter__(self) -> "FrameSender":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


# ---------------------------------------------------------------------------
# Manifest cache (decomposed local storage)
# ---------------------------------------------------------------------------

class ManifestCache:
    """Content-addressed local store for manifests and assertion bodies.

    Manifests are decomposed: assertion bodies and pipeline metadata live
    under ``bodies/`` keyed by digest, manifests under ``manifests/`` keyed
    by claim digest, linked only through hashes.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "bodies").mkdir(parents=True, exist_ok=True)
        (self.root / "manifests").mkdir(parents=True, exist_ok=True)

    def store_body(self, body: bytes) -> bytes:
        digest = sha256(body)
        path = self.root / "bodies" / digest.hex()
        if not path.exists():
            path.write_bytes(body)
        return digest

    def load_body(self, digest: bytes) -> bytes | None:
        path = self.root / "bodies" / digest.hex()
        return path.read_bytes() if path.exists() else None

    def store_manifest(self, attestation: TransformationAttestation) -> Path:
        path = self.root / "manifests" / (attestation.claim_digest().hex() + ".atlas.json")
        path.write_bytes(attestation.canonical_bytes())
        return path

    def load_manifest(self, claim_digest: bytes) -> TransformationAttestation | None:
        path = self.root / "manifests" / (claim_digest.hex() + ".atlas.json")
        if not path.exists():
            return None
        return TransformationAttestation.from_dict(decode_json(path.read_bytes()))


# ---------------------------------------------------------------------------
# Finalization
# ---------------------------------------------------------------------------

def finalize_pipeline(
    recorder: PipelineRecorder,
    inputs: Sequence[ArtifactMeasurement],
    outputs: Sequence[ArtifactMeasurement],
    precursors: Sequence[bytes],
    identity: Identity,
    platform: TeePlatform,
    cache: ManifestCache | None = None,
    operations: Sequence[OperationRecord] | None = None,
    manifest_id: str | None = None,
) -> TransformationAttestation:
    """Assemble and sign the transformation attestation for a finished run.

    Refuses to attest unless the ML system quote was verified first. Every
    recorded event is embedded by hash as an assertion; oversized payloads
    are swapped for body references, with full bodies in the local cache.
    """
    if not recorder.quote_verified or recorder.system_quote is None:
        raise AttestationRefused("system quote has not been verified; cannot attest")

    tagged_events = recorder.events_sorted()
    assertions: list[ManifestAssertion] = []
    metadata_events: list[MonitorEvent] = []
    for index, (source, event) in enumerate(tagged_events):
        body = event.canonical_bytes()
        assertions.append(
            ManifestAssertion(
                label=f"event/{source}/{index:05d}/{event.kind.value}",
                body_hash=sha256(body),
            )
        )
        if cache is not None:
            cache.store_body(body)
        payload_size = len(canonical_json(dict(event.payload)))
        if payload_size > INLINE_PAYLOAD_LIMIT and cache is not None:
            body_digest = cache.store_body(canonical_json(dict(event.payload)))
            slim = dict(event.payload)
            keep = {"path", "key", "epoch", "layer_id"}
            slim = {k: v for k, v in slim.items() if k in keep}
            slim["body_ref"] = digest_to_text(body_digest)
            event = MonitorEvent(
                kind=event.kind, timestamp=event.timestamp, payload={**slim}
            )
        metadata_events.append(event)

    metadata = PipelineMetadata(
        execution_name=recorder.execution_name,
        pipeline_spec=recorder.pipeline_spec,
        events=tuple(metadata_events),
        system_quote=recorder.system_quote,
    )
    metadata_bytes = metadata.canonical_bytes()
    if cache is not None:
        cache.store_body(metadata_bytes)

    if operations is None:
        started = tagged_events[0][1].timestamp if tagged_events else recorder.started_at
        operations = [
            OperationRecord(
                name=recorder.execution_name,
                parameters_hash=sha256(canonical_json(recorder.pipeline_spec)),
                started_at=started,
                ended_at=utc_now(),
            )
        ]

    nonce = os.urandom(32)
    client_quote = platform.issue_quote(
        env_hash=recorder.env_hash,
        code_hash=recorder.code_hash,
        nonce=nonce,
        attested_key=identity.record,
    )

    attestation = TransformationAttestation(
        manifest_id=manifest_id or new_manifest_id(),
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        operations=tuple(operations),
        precursor_hashes=tuple(precursors),
        pipeline_metadata_hash=sha256(metadata_bytes),
        client_quote=client_quote,
        assertions=tuple(assertions),
    ).signed(identity)

    if cache is not None:
        cache.store_manifest(attestation)
    return attestation
