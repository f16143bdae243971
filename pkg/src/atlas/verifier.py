"""Lineage verification with caching, batching, and selective invalidation.

A verification walks an artifact's provenance chain depth-first: every hop is
fetched from the transparency log with an inclusion proof, its claim
signature and TEE quote are checked, and the verdict plus its check results
are cached keyed to the signed root current at that moment. Cached hops are
replayed instead of re-verified once a single consistency proof shows the
pinned root still prefixes the live tree, so warm runs skip all signature
work without ever changing an outcome.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from atlas.attest import KeyRecord, verify_quote
from atlas.canonical import digest_from_text, digest_to_text, sha256
from atlas.log import (
    ENTRY_ATTESTATION,
    ENTRY_CHAIN_LINK,
    ENTRY_KEY_RECORD,
    GOLDEN_CODE_IMAGE_ID,
    GOLDEN_ENVIRONMENT_ID,
    FetchedEntry,
    LogUnavailable,
    SignedRoot,
    TrustStore,
)
from atlas.merkle import leaf_hash
from atlas.model import (
    ArtifactMeasurement,
    GoldenValue,
    TransformationAttestation,
)

REGISTER_CODE_IMAGE = 1


class VerificationError(Exception):
    pass


@dataclass(frozen=True)
class Expectation:
    """What a stakeholder requires of an artifact's lineage."""

    artifact_digest: bytes
    required_pipeline_code_hash: bytes | None = None
    required_precursor_digests: tuple[bytes, ...] | None = None
    required_stage_order: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.artifact_digest) != 32:
            raise VerificationError("artifact_digest must be 32 bytes")
        if self.required_precursor_digests is not None:
            object.__setattr__(
                self, "required_precursor_digests", tuple(self.required_precursor_digests)
            )
        if self.required_stage_order is not None:
            object.__setattr__(self, "required_stage_order", tuple(self.required_stage_order))

    def to_dict(self) -> dict[str, Any]:
        return {
            "artifact_digest": digest_to_text(self.artifact_digest),
            "required_pipeline_code_hash": (
                digest_to_text(self.required_pipeline_code_hash)
                if self.required_pipeline_code_hash
                else None
            ),
            "required_precursor_digests": (
                [digest_to_text(d) for d in self.required_precursor_digests]
                if self.required_precursor_digests is not None
                else None
            ),
            "required_stage_order": (
                list(self.required_stage_order)
                if self.required_stage_order is not None
                else None
            ),
        }

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "Expectation":
        precursors = tree.get("required_precursor_digests")
        stage_order = tree.get("required_stage_order")
        code_hash = tree.get("required_pipeline_code_hash")
        return cls(
            artifact_digest=digest_from_text(tree["artifact_digest"]),
            required_pipeline_code_hash=digest_from_text(code_hash) if code_hash else None,
            required_precursor_digests=(
                tuple(digest_from_text(d) for d in precursors)
                if precursors is not None
                else None
            ),
            required_stage_order=tuple(stage_order) if stage_order is not None else None,
        )


@dataclass
class CheckResult:
    name: str
    status: str  # "pass" | "fail"
    detail: str = ""
    cache_hit: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "status": self.status,
            "detail": self.detail,
            "cache_hit": self.cache_hit,
        }


@dataclass
class VerificationReport:
    verdict: str  # "pass" | "fail"
    checks: list[CheckResult]
    chain_length: int
    elapsed: float

    @property
    def ok(self) -> bool:
        return self.verdict == "pass"

    def failed_checks(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.ok]

    def failed_names(self) -> set[str]:
        return {c.name for c in self.failed_checks()}

    def to_dict(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "checks": [c.to_dict() for c in self.checks],
            "chain_length": self.chain_length,
            "elapsed": self.elapsed,
        }

    @classmethod
    def build(cls, checks: list[CheckResult], chain_length: int, started: float) -> "VerificationReport":
        verdict = "pass" if checks and all(c.ok for c in checks) else "fail"
        return cls(
            verdict=verdict,
            checks=checks,
            chain_length=chain_length,
            elapsed=time.perf_counter() - started,
        )


@dataclass
class CacheEntry:
    verdict: bool
    root: SignedRoot
    precursors: tuple[bytes, ...]
    checks: tuple[CheckResult, ...]
    stage_names: tuple[str, ...]


class VerificationCache:
    """Verified-transformation cache with root-pinned trust and invalidation.

    Entries stay trustworthy only while their pinned root remains
    consistency-provable against the live tree; `invalidate` evicts a failing
    entry together with every transitive dependent, leaving siblings intact.
    """

    def __init__(self) -> None:
        self._entries: dict[bytes, CacheEntry] = {}
        self.checkpoints: list[SignedRoot] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, digest: bytes) -> bool:
        with self._lock:
            return digest in self._entries

    def get(self, digest: bytes) -> CacheEntry | None:
        with self._lock:
            return self._entries.get(digest)

    def put(self, digest: bytes, entry: CacheEntry) -> None:
        with self._lock:
            self._entries[digest] = entry
            self.checkpoints.append(entry.root)

    def drop(self, digest: bytes) -> None:
        with self._lock:
            self._entries.pop(digest, None)

    def invalidate(self, failing_digest: bytes) -> int:
        """Evict the failing entry and its transitive dependents; returns count."""
        with self._lock:
            if failing_digest not in self._entries:
                return 0
            dependents: dict[bytes, list[bytes]] = {}
            for digest, entry in self._entries.items():
                for precursor in entry.precursors:
                    dependents.setdefault(precursor, []).append(digest)
            to_evict = {failing_digest}
            frontier = [failing_digest]
            while frontier:
                current = frontier.pop()
                for child in dependents.get(current, ()):  # children depend on current
                    if child not in to_evict:
                        to_evict.add(child)
                        frontier.append(child)
            for digest in to_evict:
                self._entries.pop(digest, None)
            return len(to_evict)


def invalidate(cache: VerificationCache, failing_digest: bytes) -> int:
    return cache.invalidate(failing_digest)


class _RunContext:
    """Per-verification scratch state: fetch memos and validated roots."""

    def __init__(self) -> None:
        self.entries: dict[bytes, FetchedEntry | None] = {}
        self.validated_roots: set[tuple[int, int, bytes]] = set()
        self.register_goldens: tuple[list[GoldenValue] | None, str] | None = None


@dataclass
class VerifyRequest:
    expectation: Expectation
    measurement: ArtifactMeasurement | None = None
    artifact_bytes: bytes | None = None


class Verifier:
    """Implements the verification service against any log client."""

    def __init__(self, client: Any, trust: TrustStore, cache: VerificationCache | None = None):
        self.client = client
        self.trust = trust
        self.cache = cache

    # -- public entry points ---------------------------------------------

    def verify_artifact(
        self,
        expectation: Expectation,
        artifact_bytes: bytes | None = None,
        measurement: ArtifactMeasurement | None = None,
    ) -> VerificationReport:
        started = time.perf_counter()
        checks: list[CheckResult] = []
        ctx = _RunContext()
        try:
            chain = self._verify(expectation, artifact_bytes, measurement, checks, ctx)
        except LogUnavailable as exc:
            checks.append(CheckResult("log-available", "fail", f"log-unavailable: {exc}"))
            chain = 0
        return VerificationReport.build(checks, chain, started)

    def verify_batch(self, requests: Sequence[VerifyRequest]) -> list[VerificationReport]:
        """Verify many artifacts, sharing lineage work across related requests.

        Requests whose precursor subgraphs overlap are grouped so the shared
        subchain is verified once (later requests replay it from cache);
        disjoint groups run in parallel. Per-request failures stay isolated.
        """
        if not requests:
            return []
        groups = self._group_requests(requests)
        reports: list[VerificationReport | None] = [None] * len(requests)

        def run_group(indices: list[int]) -> None:
            for i in indices:
                request = requests[i]
                try:
                    reports[i] = self.verify_artifact(
                        request.expectation,
                        artifact_bytes=request.artifact_bytes,
                        measurement=request.measurement,
                    )
                except Exception as exc:  # isolation: one failure never aborts the batch
                    reports[i] = VerificationReport(
                        verdict="fail",
                        checks=[CheckResult("error", "fail", str(exc))],
                        chain_length=0,
                        elapsed=0.0,
                    )

        if len(groups) == 1:
            run_group(groups[0])
        else:
            with ThreadPoolExecutor(max_workers=min(8, len(groups))) as pool:
                list(pool.map(run_group, groups))
        return [r for r in reports if r is not None]

    # -- grouping ----------------------------------------------------------

    def _lineage_closure(self, head: bytes, ctx: _RunContext) -> set[bytes]:
        """Claim digests reachable from head via precursor edges (no crypto)."""
        seen: set[bytes] = set()
        frontier = [head]
        while frontier:
            digest = frontier.pop()
            if digest in seen:
                continue
            seen.add(digest)
            fetched = self._fetch_entry(digest, ctx)
            if fetched is None or fetched.kind != ENTRY_ATTESTATION:
                continue
            for text in fetched.body.get("precursor_hashes", []):
                frontier.append(digest_from_text(text))
        return seen

    def _group_requests(self, requests: Sequence[VerifyRequest]) -> list[list[int]]:
        ctx = _RunContext()
        closures: list[set[bytes]] = []
        for request in requests:
            try:
                head = self._find_head(request, ctx)
                closures.append(
                    self._lineage_closure(head, ctx) if head is not None else set()
                )
            except LogUnavailable:
                closures.append(set())
        parent = list(range(len(requests)))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(len(requests)):
            for j in range(i + 1, len(requests)):
                if closures[i] & closures[j]:
                    parent[find(i)] = find(j)
        groups: dict[int, list[int]] = {}
        for i in range(len(requests)):
            groups.setdefault(find(i), []).append(i)
        return [sorted(g) for g in groups.values()]

    def _find_head(self, request: VerifyRequest, ctx: _RunContext) -> bytes | None:
        digest = request.expectation.artifact_digest
        if request.measurement is not None:
            digest = request.measurement.digest
        elif request.artifact_bytes is not None:
            digest = sha256(request.artifact_bytes)
        fetched = self.client.find_attestation_by_output(digest)
        if fetched is None:
            return None
        head = TransformationAttestation.from_dict(fetched.body).claim_digest()
        ctx.entries[head] = fetched
        return head

    # -- fetch helpers -----------------------------------------------------

    def _fetch_entry(self, digest: bytes, ctx: _RunContext) -> FetchedEntry | None:
        if digest not in ctx.entries:
            ctx.entries[digest] = self.client.get_entry(digest)
        return ctx.entries[digest]

    def _trusted_register_goldens(self, ctx: _RunContext) -> tuple[list[GoldenValue] | None, str]:
        """Fetch and signature-check the platform register golden values."""
        if ctx.register_goldens is not None:
            return ctx.register_goldens
        goldens: list[GoldenValue] = []
        result: tuple[list[GoldenValue] | None, str]
        for artifact_id in (GOLDEN_ENVIRONMENT_ID, GOLDEN_CODE_IMAGE_ID):
            fetched = self.client.find_golden(artifact_id)
            if fetched is None:
                result = (None, f"no golden value for {artifact_id}")
                ctx.register_goldens = result
                return result
            golden = GoldenValue.from_dict(fetched.body)
            producer_key = self.trust.producer_keys.get(golden.producer_key_id)
            if producer_key is None or not golden.verify(producer_key):
                result = (None, f"register golden for {artifact_id} not verifiable")
                ctx.register_goldens = result
                return result
            goldens.append(golden)
        result = (goldens, "")
        ctx.register_goldens = result
        return result

    def _root_still_trusted(self, pinned: SignedRoot, ctx: _RunContext) -> bool:
        """One consistency proof per advanced root keeps cached entries valid."""
        key = (pinned.tree_id, pinned.tree_size, pinned.root)
        if key in ctx.validated_roots:
            return True
        current = self.client.get_root(pinned.tree_id)
        if not self._root_signature_ok(current):
            return False
        if current.tree_size == pinned.tree_size:
            ok = current.root == pinned.root
        else:
            proof = self.client.get_consistency(
                pinned.tree_id, pinned.tree_size, current.tree_size
            )
            ok = proof.verify(pinned.root, current.root)
        if ok:
            ctx.validated_roots.add(key)
        return ok

    def _root_signature_ok(self, root: SignedRoot) -> bool:
        key = self.trust.log_keys.get(root.log_signature.key_id)
        return key is not None and root.verify(key)

    # -- core verification ---------------------------------------------------

    def _verify(
        self,
        expectation: Expectation,
        artifact_bytes: bytes | None,
        measurement: ArtifactMeasurement | None,
        checks: list[CheckResult],
        ctx: _RunContext,
    ) -> int:
        artifact_id: str | None = None
        digest = expectation.artifact_digest
        if measurement is not None:
            artifact_id = measurement.artifact_id
            digest = measurement.digest
        elif artifact_bytes is not None:
            digest = sha256(artifact_bytes)
        if digest != expectation.artifact_digest:
            checks.append(
                CheckResult(
                    "artifact-digest",
                    "fail",
                    "measured digest differs from expectation",
                )
            )

        # (1) + (2): golden value signature, then digest comparison
        golden_entry = self.client.find_golden(artifact_id, digest)
        if golden_entry is None:
            checks.append(CheckResult("golden-value", "fail", "no-golden-value"))
        else:
            golden = GoldenValue.from_dict(golden_entry.body)
            producer_key = self.trust.producer_keys.get(golden.producer_key_id)
            if producer_key is None:
                checks.append(
                    CheckResult("golden-signature", "fail", "unknown producer key")
                )
            elif not golden.verify(producer_key):
                checks.append(
                    CheckResult("golden-signature", "fail", "signature does not verify")
                )
            else:
                checks.append(CheckResult("golden-signature", "pass"))
            if golden.measurement.digest == digest:
                checks.append(CheckResult("golden-value", "pass"))
            else:
                checks.append(
                    CheckResult(
                        "golden-value",
                        "fail",
                        "golden-value-mismatch: artifact bytes differ from published measurement",
                    )
                )

        # (3) + (5): lineage traversal; quote checks happen per hop
        head_entry = self.client.find_attestation_by_output(digest)
        if head_entry is None:
            checks.append(CheckResult("lineage", "fail", "no-producing-attestation"))
            self._expectation_checks(expectation, None, [], checks)
            return 0
        head = TransformationAttestation.from_dict(head_entry.body)
        head_digest = head.claim_digest()
        ctx.entries[head_digest] = head_entry

        order: list[tuple[bytes, tuple[str, ...]]] = []
        self._verify_hop(head_digest, [], checks, order, ctx)

        # (4): operations/pipeline expectations
        self._expectation_checks(expectation, head, order, checks)
        return len(order)

    def _expectation_checks(
        self,
        expectation: Expectation,
        head: TransformationAttestation | None,
        order: list[tuple[bytes, tuple[str, ...]]],
        checks: list[CheckResult],
    ) -> None:
        if expectation.required_pipeline_code_hash is not None:
            if head is None:
                checks.append(CheckResult("pipeline-code", "fail", "no attestation to check"))
            elif (
                len(head.client_quote.measurement_registers) > REGISTER_CODE_IMAGE
                and head.client_quote.measurement_registers[REGISTER_CODE_IMAGE]
                == expectation.required_pipeline_code_hash
            ):
                checks.append(CheckResult("pipeline-code", "pass"))
            else:
                checks.append(
                    CheckResult("pipeline-code", "fail", "code register differs from expectation")
                )
        if expectation.required_precursor_digests is not None:
            reachable = {digest for digest, _ in order}
            missing = [
                d for d in expectation.required_precursor_digests if d not in reachable
            ]
            if missing:
                checks.append(
                    CheckResult(
                        "precursors",
                        "fail",
                        f"{len(missing)} required precursor(s) missing from lineage",
                    )
                )
            else:
                checks.append(CheckResult("precursors", "pass"))
        if expectation.required_stage_order is not None:
            stages: list[str] = []
            for _, names in order:
                stages.extend(names)
            if _is_subsequence(expectation.required_stage_order, stages):
                checks.append(CheckResult("stage-order", "pass"))
            else:
                checks.append(
                    CheckResult(
                        "stage-order",
                        "fail",
                        "pipeline stages omitted or out of order "
                        f"(expected {list(expectation.required_stage_order)}, ran {stages})",
                    )
                )

    def _verify_hop(
        self,
        digest: bytes,
        stack: list[bytes],
        checks: list[CheckResult],
        order: list[tuple[bytes, tuple[str, ...]]],
        ctx: _RunContext,
    ) -> bool:
        """Depth-first verification of one attestation and its precursors.

        Appends this hop to `order` post-order (ancestors first) and returns
        whether the whole subchain verified.
        """
        short = digest.hex()[:12]
        if digest in stack:
            checks.append(CheckResult("lineage", "fail", f"cycle-detected at {short}"))
            return False
        already = next((entry for entry in order if entry[0] == digest), None)
        if already is not None:
            return True  # shared precursor already covered in this run

        cached = self.cache.get(digest) if self.cache is not None else None
        if cached is not None and self._root_still_trusted(cached.root, ctx):
            ok = cached.verdict
            for precursor in cached.precursors:
                ok = self._verify_hop(precursor, stack + [digest], checks, order, ctx) and ok
            for check in cached.checks:
                checks.append(
                    CheckResult(check.name, check.status, check.detail, cache_hit=True)
                )
            order.append((digest, cached.stage_names))
            return ok
        if cached is not None and self.cache is not None:
            self.cache.drop(digest)  # pinned root no longer provable

        fetched = self._fetch_entry(digest, ctx)
        if fetched is None:
            checks.append(CheckResult("lineage", "fail", f"missing attestation {short}"))
            return False

        hop_checks: list[CheckResult] = []
        ok = True

        root_ok = self._root_signature_ok(fetched.signed_root)
        hop_checks.append(
            CheckResult(
                "log-root-signature",
                "pass" if root_ok else "fail",
                "" if root_ok else f"untrusted root for hop {short}",
            )
        )
        ok = ok and root_ok

        included = root_ok and fetched.proof.verify(
            leaf_hash(fetched.entry_bytes), fetched.signed_root.root
        )
        hop_checks.append(
            CheckResult(
                "inclusion-proof",
                "pass" if included else "fail",
                "" if included else f"hop {short} not provably in the log",
            )
        )
        ok = ok and included

        attestation: TransformationAttestation | None = None
        precursors: tuple[bytes, ...] = ()
        stage_names: tuple[str, ...] = ()
        try:
            if fetched.kind != ENTRY_ATTESTATION:
                raise VerificationError(f"entry {short} is a {fetched.kind}, not an attestation")
            attestation = TransformationAttestation.from_dict(fetched.body)
            if attestation.claim_digest() != digest:
                raise VerificationError("served claim bytes do not match requested digest")
        except Exception as exc:
            hop_checks.append(CheckResult("attestation-signature", "fail", str(exc)))
            ok = False

        if attestation is not None:
            precursors = attestation.precursor_hashes
            stage_names = tuple(op.name for op in attestation.operations)
            signer = None
            if attestation.signature is not None:
                signer_entry = self.client.get_entry(attestation.signature.key_id)
                if signer_entry is not None and signer_entry.kind == ENTRY_KEY_RECORD:
                    signer = KeyRecord.from_dict(signer_entry.body)
            if signer is not None and attestation.verify_claim_signature(signer.public_key):
                hop_checks.append(CheckResult("attestation-signature", "pass"))
            else:
                hop_checks.append(
                    CheckResult(
                        "attestation-signature",
                        "fail",
                        f"claim signature of {short} does not verify",
                    )
                )
                ok = False

            binds = signer is not None and attestation.client_quote.binds_key(signer.public_key)
            hop_checks.append(
                CheckResult(
                    "quote-binding",
                    "pass" if binds else "fail",
                    "" if binds else f"quote of {short} does not bind the signing key",
                )
            )
            ok = ok and binds

            goldens, golden_err = self._trusted_register_goldens(ctx)
            if goldens is None:
                hop_checks.append(CheckResult("quote", "fail", golden_err))
                ok = False
            else:
                verdict = verify_quote(
                    attestation.client_quote,
                    expected_registers=goldens,
                    nonce=None,
                    platform_keys=self.trust.platform_keys,
                )
                hop_checks.append(
                    CheckResult(
                        "quote",
                        "pass" if verdict.accepted else "fail",
                        verdict.reason or "",
                    )
                )
                ok = ok and verdict.accepted

        for precursor in precursors:
            ok = self._verify_hop(precursor, stack + [digest], checks, order, ctx) and ok

        checks.extend(hop_checks)
        order.append((digest, stage_names))
        if self.cache is not None:
            self.cache.put(
                digest,
                CacheEntry(
                    verdict=all(c.ok for c in hop_checks),
                    root=fetched.signed_root,
                    precursors=precursors,
                    checks=tuple(
                        CheckResult(c.name, c.status, c.detail) for c in hop_checks
                    ),
                    stage_names=stage_names,
                ),
            )
        return ok


def _is_subsequence(required: Sequence[str], actual: Sequence[str]) -> bool:
    it = iter(actual)
    return all(any(stage == candidate for candidate in it) for stage in required)


# ---------------------------------------------------------------------------
# Tree-chain audit
# ---------------------------------------------------------------------------

@dataclass
class ChainAuditReport:
    checks: list[CheckResult]
    tree_count: int

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def first_failure(self) -> CheckResult | None:
        return next((c for c in self.checks if not c.ok), None)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "tree_count": self.tree_count,
            "checks": [c.to_dict() for c in self.checks],
        }


def audit_chain(
    client: Any,
    trust: TrustStore,
    checkpoints: Iterable[SignedRoot] = (),
) -> ChainAuditReport:
    """Walk the tree chain: root signatures, chain links, pinned checkpoints.

    For each tree the served root's signature is checked; for each tree after
    the first, leaf 0 must prove inclusion under that root and embed exactly
    the predecessor root the service serves. Pinned checkpoints are extended
    to the live tree with one consistency proof each.
    """
    checks: list[CheckResult] = []
    count = client.tree_count()
    previous: SignedRoot | None = None
    for tree_id in range(count):
        served = client.get_root(tree_id)
        key = trust.log_keys.get(served.log_signature.key_id)
        sig_ok = key is not None and served.verify(key)
        checks.append(
            CheckResult(
                f"root-signature[{tree_id}]",
                "pass" if sig_ok else "fail",
                "" if sig_ok else "root signature does not verify",
            )
        )
        if tree_id > 0:
            link_ok = True
            detail = ""
            entry = client.get_entry_at(tree_id, 0)
            if entry.kind != ENTRY_CHAIN_LINK:
                link_ok, detail = False, "leaf 0 is not a chain link"
            elif not entry.proof.verify(leaf_hash(entry.entry_bytes), served.root):
                link_ok, detail = False, "chain-link leaf not provable under served root"
            else:
                body = entry.body
                embedded = digest_from_text(body["predecessor_root"])
                if body.get("predecessor_tree_id") != tree_id - 1:
                    link_ok, detail = False, "chain link names the wrong predecessor"
                elif previous is None or embedded != previous.root:
                    link_ok, detail = False, "embedded predecessor root differs from served root"
                elif body.get("predecessor_size") != previous.tree_size:
                    link_ok, detail = False, "embedded predecessor size differs"
            checks.append(
                CheckResult(f"link[{tree_id}]", "pass" if link_ok else "fail", detail)
            )
        previous = served
    for checkpoint in checkpoints:
        current = client.get_root(checkpoint.tree_id)
        proof = client.get_consistency(
            checkpoint.tree_id, checkpoint.tree_size, current.tree_size
        )
        ok = proof.verify(checkpoint.root, current.root)
        checks.append(
            CheckResult(
                f"consistency[{checkpoint.tree_id}@{checkpoint.tree_size}]",
                "pass" if ok else "fail",
                "" if ok else "checkpoint no longer prefixes the live tree",
            )
        )
    return ChainAuditReport(checks=checks, tree_count=count)
