"""HTTP surface for the transparency log and the verification endpoint.

Small threaded stdlib server; every body is canonical JSON. The verification
endpoint lives on the same process as the log, mirroring a sidecar that
serves both roles. `HttpLogClient` implements the same contract as
`DirectLogClient`, so the verifier never knows which transport it is on.
"""

from __future__ import annotations

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping
from urllib.parse import parse_qs, urlparse

import requests

from atlas.canonical import canonical_json, decode_json, digest_from_text
from atlas.log import (
    AdmissionError,
    ConsistencyProof,
    DirectLogClient,
    ENTRY_ATTESTATION,
    FetchedEntry,
    InclusionProof,
    LogError,
    LogUnavailable,
    SignedRoot,
    TransparencyLog,
)
from atlas.verifier import Expectation, Verifier, VerificationCache, VerifyRequest


class AtlasHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], log: TransparencyLog, enable_verify: bool = True):
        super().__init__(address, AtlasRequestHandler)
        self.log = log
        self.client = DirectLogClient(log)
        self.verifier = (
            Verifier(self.client, log.trust, VerificationCache()) if enable_verify else None
        )

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


class AtlasRequestHandler(BaseHTTPRequestHandler):
    server: AtlasHTTPServer
    protocol_version = "HTTP/1.1"

    def log_message(self, format: str, *args: Any) -> None:
        pass  # keep test output quiet

    # -- plumbing ----------------------------------------------------------

    def _send(self, status: int, tree: Mapping[str, Any]) -> None:
        body = canonical_json(tree)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, reason: str, detail: str = "") -> None:
        self._send(status, {"error": {"reason": reason, "detail": detail}})

    def _read_body(self) -> Any:
        length = int(self.headers.get("Content-Length", "0"))
        return decode_json(self.rfile.read(length))

    # -- routes -------------------------------------------------------------

    def do_GET(self) -> None:
        parsed = urlparse(self.path)
        query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
        try:
            self._route_get(parsed.path, query)
        except LogError as exc:
            self._error(404, "not-found", str(exc))
        except Exception as exc:
            self._error(500, "internal", str(exc))

    def _route_get(self, path: str, query: dict[str, str]) -> None:
        client = self.server.client
        if path == "/api/v1/root":
            tree_id = int(query["tree"]) if "tree" in query else None
            self._send(200, client.get_root(tree_id).to_dict())
        elif path == "/api/v1/trees":
            self._send(200, {"tree_count": client.tree_count()})
        elif path == "/api/v1/proof/inclusion":
            proof, root = client.get_inclusion(int(query["tree"]), int(query["index"]))
            self._send(200, {"proof": proof.to_dict(), "signed_root": root.to_dict()})
        elif path == "/api/v1/proof/consistency":
            proof = client.get_consistency(
                int(query["tree"]), int(query["old"]), int(query["new"])
            )
            self._send(200, {"proof": proof.to_dict()})
        elif path == "/api/v1/golden":
            artifact_id = query.get("artifact_id")
            digest = digest_from_text(query["digest"]) if "digest" in query else None
            fetched = client.find_golden(artifact_id, digest)
            if fetched is None:
                self._error(404, "not-found", "no golden value recorded")
            else:
                self._send(200, fetched.to_dict())
        elif path.startswith("/api/v1/entries/"):
            digest = path.rsplit("/", 1)[1]
            if query.get("by") == "output":
                fetched = client.find_attestation_by_output(_parse_digest(digest))
            elif "tree" in query:
                fetched = client.get_entry_at(int(query["tree"]), int(query["index"]))
            else:
                fetched = client.get_entry(digest)
            if fetched is None:
                self._error(404, "not-found", f"no entry for {digest}")
            else:
                self._send(200, fetched.to_dict())
        elif path == "/api/v1/entries":
            fetched = client.get_entry_at(int(query["tree"]), int(query["index"]))
            self._send(200, fetched.to_dict())
        else:
            self._error(404, "not-found", path)

    def do_POST(self) -> None:
        parsed = urlparse(self.path)
        try:
            body = self._read_body()
        except Exception as exc:
            self._error(400, "bad-request", f"unparseable body: {exc}")
            return
        try:
            self._route_post(parsed.path, body)
        except AdmissionError as exc:
            self._send(
                409 if exc.reason == "duplicate" else 400,
                {"error": {"reason": exc.reason, "detail": exc.detail}},
            )
        except LogError as exc:
            self._error(400, "log-error", str(exc))
        except Exception as exc:
            self._error(500, "internal", str(exc))

    def _route_post(self, path: str, body: Any) -> None:
        client = self.server.client
        if path == "/api/v1/entries":
            if isinstance(body, Mapping) and "kind" in body and "body" in body:
                kind, payload = body["kind"], body["body"]
            else:
                kind, payload = ENTRY_ATTESTATION, body
            result = client.submit(kind, payload)
            self._send(201, result)
        elif path == "/api/v1/seal":
            sealed, opened = client.seal()
            self._send(
                200, {"sealed_root": sealed.to_dict(), "new_root": opened.to_dict()}
            )
        elif path == "/api/v1/verify":
            if self.server.verifier is None:
                self._error(404, "not-found", "verification endpoint disabled")
                return
            expectation = Expectation.from_dict(
                body["expectation"] if "expectation" in body else body
            )
            report = self.server.verifier.verify_artifact(expectation)
            self._send(200, report.to_dict())
        elif path == "/api/v1/verify/batch":
            if self.server.verifier is None:
                self._error(404, "not-found", "verification endpoint disabled")
                return
            requests_in = [
                VerifyRequest(expectation=Expectation.from_dict(item))
                for item in body["requests"]
            ]
            reports = self.server.verifier.verify_batch(requests_in)
            self._send(200, {"reports": [r.to_dict() for r in reports]})
        else:
            self._error(404, "not-found", path)


def _parse_digest(text: str) -> bytes:
    if text.startswith("sha256:"):
        text = text[len("sha256:"):]
    return bytes.fromhex(text)


def serve_log(
    log: TransparencyLog,
    host: str = "127.0.0.1",
    port: int = 0,
    enable_verify: bool = True,
) -> AtlasHTTPServer:
    """Create the server; call serve_forever() or start_in_thread() on it."""
    return AtlasHTTPServer((host, port), log, enable_verify)


def start_in_thread(server: AtlasHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, name="atlas-log-service", daemon=True)
    thread.start()
    return thread


# ---------------------------------------------------------------------------
# HTTP client
# ---------------------------------------------------------------------------

class HttpLogClient:
    """requests-backed client with the same contract as DirectLogClient.

    Sessions are per-thread so batch verification can fan out safely.
    """

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _get(self, path: str, params: dict[str, Any] | None = None) -> Any:
        try:
            response = self._session().get(
                self.base_url + path, params=params, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise LogUnavailable(str(exc)) from exc
        if response.status_code == 404:
            return None
        if response.status_code >= 400:
            raise LogError(f"GET {path}: {response.status_code} {response.text}")
        return response.json()

    def _post(self, path: str, body: Mapping[str, Any]) -> Any:
        try:
            response = self._session().post(
                self.base_url + path,
                data=canonical_json(body),
                headers={"Content-Type": "application/json"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise LogUnavailable(str(exc)) from exc
        if response.status_code >= 400:
            tree = {}
            try:
                tree = response.json()
            except ValueError:
                pass
            error = tree.get("error", {})
            raise AdmissionError(
                error.get("reason", f"http-{response.status_code}"),
                error.get("detail", response.text[:200]),
            )
        return response.json()

    # -- contract -----------------------------------------------------------

    def get_root(self, tree_id: int | None = None) -> SignedRoot:
        params = {"tree": tree_id} if tree_id is not None else None
        tree = self._get("/api/v1/root", params)
        if tree is None:
            raise LogError("log has no root")
        return SignedRoot.from_dict(tree)

    def tree_count(self) -> int:
        tree = self._get("/api/v1/trees")
        return tree["tree_count"]

    def get_entry(self, digest: bytes | str) -> FetchedEntry | None:
        text = digest.hex() if isinstance(digest, bytes) else digest
        tree = self._get(f"/api/v1/entries/{text}")
        return FetchedEntry.from_dict(tree) if tree is not None else None

    def get_entry_at(self, tree_id: int, leaf_index: int) -> FetchedEntry:
        tree = self._get("/api/v1/entries", {"tree": tree_id, "index": leaf_index})
        if tree is None:
            raise LogError(f"no entry at tree {tree_id} index {leaf_index}")
        return FetchedEntry.from_dict(tree)

    def find_attestation_by_output(self, artifact_digest: bytes) -> FetchedEntry | None:
        tree = self._get(f"/api/v1/entries/{artifact_digest.hex()}", {"by": "output"})
        return FetchedEntry.from_dict(tree) if tree is not None else None

    def find_golden(
        self, artifact_id: str | None, digest: bytes | None = None
    ) -> FetchedEntry | None:
        params: dict[str, Any] = {}
        if artifact_id is not None:
            params["artifact_id"] = artifact_id
        if digest is not None:
            params["digest"] = "sha256:" + digest.hex()
        tree = self._get("/api/v1/golden", params)
        return FetchedEntry.from_dict(tree) if tree is not None else None

    def get_consistency(self, tree_id: int, old_size: int, new_size: int) -> ConsistencyProof:
        tree = self._get(
            "/api/v1/proof/consistency",
            {"tree": tree_id, "old": old_size, "new": new_size},
        )
        if tree is None:
            raise LogError("no consistency proof")
        return ConsistencyProof.from_dict(tree["proof"])

    def get_inclusion(self, tree_id: int, leaf_index: int) -> tuple[InclusionProof, SignedRoot]:
        tree = self._get("/api/v1/proof/inclusion", {"tree": tree_id, "index": leaf_index})
        if tree is None:
            raise LogError("no inclusion proof")
        return (
            InclusionProof.from_dict(tree["proof"]),
            SignedRoot.from_dict(tree["signed_root"]),
        )

    def submit(self, kind: str, body: Mapping[str, Any]) -> dict[str, Any]:
        return self._post("/api/v1/entries", {"kind": kind, "body": dict(body)})

    def seal(self) -> tuple[SignedRoot, SignedRoot]:
        tree = self._post("/api/v1/seal", {})
        return SignedRoot.from_dict(tree["sealed_root"]), SignedRoot.from_dict(tree["new_root"])

    def verify(self, expectation: Expectation) -> dict[str, Any]:
        return self._post("/api/v1/verify", {"expectation": expectation.to_dict()})

    def close(self) -> None:
        session = getattr(self._local, "session", None)
        if session is not None:
            session.close()
