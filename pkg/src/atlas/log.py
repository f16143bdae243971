"""Append-only Merkle transparency log with admission checks and tree chaining.

The log holds one active tree at a time; sealing embeds the sealed root into
leaf 0 of the successor, forming a tamper-evident chain across pipeline runs.
Entries are canonical JSON envelopes — attestations, golden values, key
records, and chain links — and every admission validates signatures, quote
binding, and precursor resolution before anything is appended. Storage is a
plain append-only file of entry lines per tree, rebuilt by replay on open.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping

from atlas import merkle
from atlas.attest import (
    ClaimSignature,
    Identity,
    KeyRecord,
    verify_quote,
)
from atlas.canonical import (
    canonical_json,
    decode_json,
    digest_from_text,
    digest_to_text,
    sha256,
)
from atlas.model import GoldenValue, TransformationAttestation

ENTRY_ATTESTATION = "attestation"
ENTRY_GOLDEN_VALUE = "golden-value"
ENTRY_KEY_RECORD = "key-record"
ENTRY_CHAIN_LINK = "chain-link"

# Conventional artifact ids for the platform measurement golden values
# (register 0 and register 1 of every quote).
GOLDEN_ENVIRONMENT_ID = "urn:atlas:platform:environment"
GOLDEN_CODE_IMAGE_ID = "urn:atlas:platform:code-image"


class LogError(Exception):
    """Log storage or lookup failure."""


class TreeSealedError(LogError):
    """Write attempted against a sealed tree."""


class AdmissionError(LogError):
    """Entry rejected before append; the tree is unchanged.

    Reasons: bad-signature, unknown-precursor, quote-invalid, tree-sealed,
    duplicate, empty-operations, bad-entry.
    """

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class TrustStore:
    """Public keys and golden register values a log or verifier trusts."""

    def __init__(self) -> None:
        self.platform_keys: dict[str, bytes] = {}
        self.producer_keys: dict[str, bytes] = {}
        self.log_keys: dict[str, bytes] = {}
        self.register_goldens: list[GoldenValue] | None = None

    def add_platform_key(self, key_id: str, public_key: bytes) -> None:
        self.platform_keys[key_id] = public_key

    def add_producer_key(self, key_id: str, public_key: bytes) -> None:
        self.producer_keys[key_id] = public_key

    def add_log_key(self, key_id: str, public_key: bytes) -> None:
        self.log_keys[key_id] = public_key

    def set_register_goldens(self, goldens: list[GoldenValue]) -> None:
        self.register_goldens = list(goldens)

    @property
    def register_digests(self) -> list[bytes] | None:
        if self.register_goldens is None:
            return None
        return [g.measurement.digest for g in self.register_goldens]


@dataclass(frozen=True)
class SignedRoot:
    """Log-signed statement of a tree's root at a given size."""

    tree_id: int
    tree_size: int
    root: bytes
    log_signature: ClaimSignature

    def signed_body(self) -> dict[str, Any]:
        return {
            "tree_id": self.tree_id,
            "tree_size": self.tree_size,
            "root": digest_to_text(self.root),
        }

    def signed_bytes(self) -> bytes:
        return canonical_json(self.signed_body())

    def verify(self, log_public_key: bytes) -> bool:
        from atlas.attest import verify_signature

        return verify_signature(log_public_key, self.log_signature.sig, self.signed_bytes())

    def to_dict(self) -> dict[str, Any]:
        tree = self.signed_body()
        tree["log_signature"] = self.log_signature.to_dict()
        return tree

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "SignedRoot":
        return cls(
            tree_id=tree["tree_id"],
            tree_size=tree["tree_size"],
            root=digest_from_text(tree["root"]),
            log_signature=ClaimSignature.from_dict(tree["log_signature"]),
        )


@dataclass(frozen=True)
class InclusionProof:
    leaf_index: int
    tree_size: int
    audit_path: tuple[bytes, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "leaf_index": self.leaf_index,
            "tree_size": self.tree_size,
            "audit_path": [h.hex() for h in self.audit_path],
        }

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "InclusionProof":
        return cls(
            leaf_index=tree["leaf_index"],
            tree_size=tree["tree_size"],
            audit_path=tuple(bytes.fromhex(h) for h in tree["audit_path"]),
        )

    def verify(self, leaf: bytes, expected_root: bytes) -> bool:
        return merkle.verify_inclusion(
            leaf, self.leaf_index, self.tree_size, self.audit_path, expected_root
        )


@dataclass(frozen=True)
class ConsistencyProof:
    old_size: int
    new_size: int
    path: tuple[bytes, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "old_size": self.old_size,
            "new_size": self.new_size,
            "path": [h.hex() for h in self.path],
        }

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "ConsistencyProof":
        return cls(
            old_size=tree["old_size"],
            new_size=tree["new_size"],
            path=tuple(bytes.fromhex(h) for h in tree["path"]),
        )

    def verify(self, old_root: bytes, new_root: bytes) -> bool:
        return merkle.verify_consistency(
            self.old_size, self.new_size, old_root, new_root, self.path
        )


@dataclass(frozen=True)
class EntryRef:
    tree_id: int
    leaf_index: int
    kind: str


def make_envelope(kind: str, body: Mapping[str, Any]) -> dict[str, Any]:
    return {"kind": kind, "body": dict(body)}


def chain_link_body(tree_id: int, root: bytes, size: int) -> dict[str, Any]:
    return {
        "predecessor_tree_id": tree_id,
        "predecessor_root": digest_to_text(root),
        "predecessor_size": size,
    }


class TreeState:
    """One Merkle tree in the chain: entries, leaf hashes, sealed flag."""

    def __init__(self, tree_id: int, chain_link: bytes | None = None):
        self.tree_id = tree_id
        self.entries: list[bytes] = []
        self.leaf_hashes: list[bytes] = []
        self.sealed = False
        self.chain_link = chain_link

    @property
    def size(self) -> int:
        return len(self.leaf_hashes)

    def append(self, entry_bytes: bytes) -> int:
        if self.sealed:
            raise TreeSealedError(f"tree {self.tree_id} is sealed")
        self.entries.append(entry_bytes)
        self.leaf_hashes.append(merkle.leaf_hash(entry_bytes))
        return len(self.leaf_hashes) - 1

    def root(self, size: int | None = None) -> bytes:
        size = self.size if size is None else size
        return merkle.root(self.leaf_hashes[:size])

    def seal(self) -> None:
        if not self.leaf_hashes:
            raise LogError(f"cannot seal empty tree {self.tree_id}")
        self.sealed = True


class TransparencyLog:
    """Chained append-only log. Single writer; reads see immutable prefixes."""

    def __init__(
        self,
        log_dir: str | Path | None = None,
        identity: Identity | None = None,
        trust: TrustStore | None = None,
    ):
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.trust = trust if trust is not None else TrustStore()
        self._write_lock = threading.RLock()
        self.trees: list[TreeState] = []
        self._attestations: dict[bytes, EntryRef] = {}
        self._outputs: dict[bytes, list[bytes]] = {}
        self._golden_by_id: dict[str, EntryRef] = {}
        self._golden_by_digest: dict[bytes, EntryRef] = {}
        self._keys: dict[str, EntryRef] = {}
        self._entry_digests: dict[bytes, EntryRef] = {}

        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            key_path = self.log_dir / "log-identity.pem"
            if identity is None:
                if key_path.exists():
                    identity = Identity.load(key_path, created_inside_tee=False)
                else:
                    identity = Identity.generate(created_inside_tee=False)
                    identity.save(key_path)
        self.identity = identity or Identity.generate(created_inside_tee=False)
        self.trust.add_log_key(self.identity.key_id, self.identity.public_key)

        if self.log_dir is not None and sorted(self.log_dir.glob("tree-*.log")):
            self._replay()
        else:
            self.trees.append(TreeState(tree_id=0))

    # -- storage --------------------------------------------------------

    def _tree_path(self, tree_id: int) -> Path:
        assert self.log_dir is not None
        return self.log_dir / f"tree-{tree_id:05d}.log"

    def _persist_entry(self, tree_id: int, entry_bytes: bytes) -> None:
        if self.log_dir is None:
            return
        with self._tree_path(tree_id).open("ab") as fh:
            fh.write(entry_bytes + b"\n")
            fh.flush()

    def _replay(self) -> None:
        assert self.log_dir is not None
        paths = sorted(self.log_dir.glob("tree-*.log"))
        for expected_id, path in enumerate(paths):
            tree_id = int(path.stem.split("-")[1])
            if tree_id != expected_id:
                raise LogError(f"tree file gap: expected tree {expected_id}, found {tree_id}")
            tree = TreeState(tree_id=tree_id)
            self.trees.append(tree)
            for line in path.read_bytes().splitlines():
                if not line:
                    continue
                envelope = decode_json(line)
                index = tree.append(line)
                self._index_entry(tree_id, index, envelope, line)
                if index == 0 and envelope.get("kind") == ENTRY_CHAIN_LINK:
                    tree.chain_link = digest_from_text(envelope["body"]["predecessor_root"])
        for tree in self.trees[:-1]:
            tree.seal()
        # chain links must match the recomputed predecessor roots
        for tree in self.trees[1:]:
            if tree.chain_link is None:
                raise LogError(f"tree {tree.tree_id} is missing its chain link")
            if tree.chain_link != self.trees[tree.tree_id - 1].root():
                raise LogError(f"chain link of tree {tree.tree_id} does not match predecessor")

    def _index_entry(
        self, tree_id: int, index: int, envelope: Mapping[str, Any], entry_bytes: bytes
    ) -> EntryRef:
        kind = envelope.get("kind")
        body = envelope.get("body")
        if not isinstance(kind, str) or not isinstance(body, dict):
            raise LogError("entry envelope must carry kind and body")
        ref = EntryRef(tree_id=tree_id, leaf_index=index, kind=kind)
        # parse before touching any index so a bad entry leaves no trace
        if kind == ENTRY_ATTESTATION:
            attestation = TransformationAttestation.from_dict(body)
            claim_digest = attestation.claim_digest()
            self._attestations[claim_digest] = ref
            for output in attestation.outputs:
                self._outputs.setdefault(output.digest, []).append(claim_digest)
        elif kind == ENTRY_GOLDEN_VALUE:
            golden = GoldenValue.from_dict(body)
            self._golden_by_id[golden.measurement.artifact_id] = ref
            self._golden_by_digest[golden.measurement.digest] = ref
        elif kind == ENTRY_KEY_RECORD:
            record = KeyRecord.from_dict(body)
            self._keys[record.key_id] = ref
        self._entry_digests[sha256(entry_bytes)] = ref
        return ref

    # -- admission and append --------------------------------------------

    @property
    def active_tree(self) -> TreeState:
        return self.trees[-1]

    def _append(self, kind: str, body: Mapping[str, Any]) -> tuple[EntryRef, SignedRoot]:
        envelope = make_envelope(kind, body)
        entry_bytes = canonical_json(envelope)
        if sha256(entry_bytes) in self._entry_digests:
            raise AdmissionError("duplicate", "identical entry already stored")
        tree = self.active_tree
        index = tree.append(entry_bytes)
        try:
            ref = self._index_entry(tree.tree_id, index, envelope, entry_bytes)
        except Exception:
            del tree.entries[index:]
            del tree.leaf_hashes[index:]
            raise
        self._persist_entry(tree.tree_id, entry_bytes)
        return ref, self.signed_root(tree.tree_id)

    def resolve_signer_key(self, key_id: str) -> KeyRecord | None:
        ref = self._keys.get(key_id)
        if ref is None:
            return None
        envelope = decode_json(self.entry_bytes(ref))
        return KeyRecord.from_dict(envelope["body"])

    def submit_key_record(self, record: KeyRecord) -> tuple[EntryRef, SignedRoot]:
        with self._write_lock:
            if record.key_id in self._keys:
                raise AdmissionError("duplicate", f"key {record.key_id} already registered")
            return self._append(ENTRY_KEY_RECORD, record.to_dict())

    def submit_golden_value(self, golden: GoldenValue) -> tuple[EntryRef, SignedRoot]:
        with self._write_lock:
            producer_key = self.trust.producer_keys.get(golden.producer_key_id)
            if producer_key is None:
                raise AdmissionError("bad-signature", "unknown producer key")
            if not golden.verify(producer_key):
                raise AdmissionError("bad-signature", "golden value signature invalid")
            if golden.measurement.artifact_id in self._golden_by_id:
                raise AdmissionError(
                    "duplicate", f"golden value for {golden.measurement.artifact_id} exists"
                )
            return self._append(ENTRY_GOLDEN_VALUE, golden.to_dict())

    def submit_attestation(
        self, attestation: TransformationAttestation
    ) -> tuple[EntryRef, SignedRoot]:
        """Admission-checked append: signature, quote, and precursors first."""
        with self._write_lock:
            if self.active_tree.sealed:
                raise AdmissionError("tree-sealed", f"tree {self.active_tree.tree_id} is sealed")
            claim_digest = attestation.claim_digest()
            if claim_digest in self._attestations:
                raise AdmissionError("duplicate", "attestation already in log")
            if not attestation.operations:
                raise AdmissionError(
                    "empty-operations", "pure re-publication carries no operations"
                )
            if attestation.signature is None:
                raise AdmissionError("bad-signature", "attestation is unsigned")
            signer = self.resolve_signer_key(attestation.signature.key_id)
            if signer is None:
                raise AdmissionError(
                    "bad-signature", f"unknown signer key {attestation.signature.key_id}"
                )
            if not attestation.verify_claim_signature(signer.public_key):
                raise AdmissionError("bad-signature", "claim signature does not verify")
            verdict = verify_quote(
                attestation.client_quote,
                expected_registers=self.trust.register_digests,
                nonce=None,
                platform_keys=self.trust.platform_keys,
            )
            if not verdict.accepted:
                raise AdmissionError("quote-invalid", verdict.reason or "quote rejected")
            if not attestation.client_quote.binds_key(signer.public_key):
                raise AdmissionError("quote-invalid", "quote does not bind the signing key")
            for precursor in attestation.precursor_hashes:
                if precursor not in self._attestations:
                    raise AdmissionError(
                        "unknown-precursor", f"no log entry for {precursor.hex()[:16]}"
                    )
            return self._append(ENTRY_ATTESTATION, attestation.to_dict())

    def seal_and_chain(self) -> tuple[SignedRoot, SignedRoot]:
        """Seal the active tree and open its successor with a chain-link leaf."""
        with self._write_lock:
            current = self.active_tree
            if current.size == 0:
                raise LogError("cannot seal an empty tree")
            sealed_root_bytes = current.root()
            current.seal()
            sealed_root = self.signed_root(current.tree_id)
            successor = TreeState(tree_id=current.tree_id + 1, chain_link=sealed_root_bytes)
            self.trees.append(successor)
            link = make_envelope(
                ENTRY_CHAIN_LINK,
                chain_link_body(current.tree_id, sealed_root_bytes, current.size),
            )
            entry_bytes = canonical_json(link)
            index = successor.append(entry_bytes)
            self._index_entry(successor.tree_id, index, link, entry_bytes)
            self._persist_entry(successor.tree_id, entry_bytes)
            return sealed_root, self.signed_root(successor.tree_id)

    # -- reads -----------------------------------------------------------

    def tree(self, tree_id: int) -> TreeState:
        if not 0 <= tree_id < len(self.trees):
            raise LogError(f"no tree {tree_id}")
        return self.trees[tree_id]

    def entry_bytes(self, ref: EntryRef) -> bytes:
        return self.tree(ref.tree_id).entries[ref.leaf_index]

    def signed_root(self, tree_id: int | None = None) -> SignedRoot:
        tree = self.active_tree if tree_id is None else self.tree(tree_id)
        body = {
            "tree_id": tree.tree_id,
            "tree_size": tree.size,
            "root": digest_to_text(tree.root()),
        }
        signature = self.identity.sign_claim(canonical_json(body))
        return SignedRoot(
            tree_id=tree.tree_id,
            tree_size=tree.size,
            root=tree.root(),
            log_signature=signature,
        )

    def prove_inclusion(self, tree_id: int, leaf_index: int) -> InclusionProof:
        tree = self.tree(tree_id)
        if not 0 <= leaf_index < tree.size:
            raise LogError(f"leaf {leaf_index} out of range for tree {tree_id}")
        path = merkle.inclusion_path(leaf_index, tree.leaf_hashes)
        return InclusionProof(
            leaf_index=leaf_index, tree_size=tree.size, audit_path=tuple(path)
        )

    def prove_consistency(self, tree_id: int, old_size: int, new_size: int) -> ConsistencyProof:
        tree = self.tree(tree_id)
        if not 0 <= old_size <= new_size <= tree.size:
            raise LogError(
                f"sizes {old_size}..{new_size} out of range for tree {tree_id} of {tree.size}"
            )
        path = merkle.consistency_path(old_size, tree.leaf_hashes[:new_size])
        return ConsistencyProof(old_size=old_size, new_size=new_size, path=tuple(path))

    def lookup(self, digest: bytes | str) -> EntryRef | None:
        """Resolve a digest or key id to a stored entry.

        Tries, in order: attestation claim digest, key id, golden value by
        measured artifact digest, exact entry digest.
        """
        if isinstance(digest, str):
            text = digest[len("sha256:"):] if digest.startswith("sha256:") else digest
            try:
                digest = bytes.fromhex(text)
            except ValueError:
                return None
            if len(digest) != 32:
                return None
        for index in (self._attestations, self._golden_by_digest, self._entry_digests):
            ref = index.get(digest)
            if ref is not None:
                return ref
        return self._keys.get(digest.hex())

    def find_attestation_by_output(self, artifact_digest: bytes) -> bytes | None:
        """Claim digest of the most recent attestation producing the artifact."""
        producers = self._outputs.get(artifact_digest)
        return producers[-1] if producers else None

    def find_golden_by_artifact_id(self, artifact_id: str) -> EntryRef | None:
        return self._golden_by_id.get(artifact_id)

    def find_golden_by_digest(self, digest: bytes) -> EntryRef | None:
        return self._golden_by_digest.get(digest)

    def get_attestation(self, claim_digest: bytes) -> TransformationAttestation | None:
        ref = self._attestations.get(claim_digest)
        if ref is None:
            return None
        envelope = decode_json(self.entry_bytes(ref))
        return TransformationAttestation.from_dict(envelope["body"])

    def iter_entries(self, tree_id: int) -> Iterator[tuple[int, dict[str, Any]]]:
        tree = self.tree(tree_id)
        for index, raw in enumerate(tree.entries):
            yield index, decode_json(raw)

    @property
    def tree_count(self) -> int:
        return len(self.trees)


# ---------------------------------------------------------------------------
# Client interface (the HTTP client in atlas.service mirrors this exactly)
# ---------------------------------------------------------------------------

class LogUnavailable(LogError):
    """The log service cannot be reached."""


@dataclass(frozen=True)
class FetchedEntry:
    """A log entry together with the proof material needed to trust it."""

    envelope: Mapping[str, Any]
    entry_bytes: bytes
    tree_id: int
    leaf_index: int
    proof: InclusionProof
    signed_root: SignedRoot

    @property
    def kind(self) -> str:
        return self.envelope["kind"]

    @property
    def body(self) -> Mapping[str, Any]:
        return self.envelope["body"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry": dict(self.envelope),
            "tree_id": self.tree_id,
            "leaf_index": self.leaf_index,
            "proof": self.proof.to_dict(),
            "signed_root": self.signed_root.to_dict(),
        }

    @classmethod
    def from_dict(cls, tree: Mapping[str, Any]) -> "FetchedEntry":
        envelope = tree["entry"]
        return cls(
            envelope=envelope,
            entry_bytes=canonical_json(envelope),
            tree_id=tree["tree_id"],
            leaf_index=tree["leaf_index"],
            proof=InclusionProof.from_dict(tree["proof"]),
            signed_root=SignedRoot.from_dict(tree["signed_root"]),
        )


class DirectLogClient:
    """In-process client speaking the same contract as the HTTP client."""

    def __init__(self, log: TransparencyLog):
        self.log = log

    def _fetch(self, ref: EntryRef) -> FetchedEntry:
        entry_bytes = self.log.entry_bytes(ref)
        return FetchedEntry(
            envelope=decode_json(entry_bytes),
            entry_bytes=entry_bytes,
            tree_id=ref.tree_id,
            leaf_index=ref.leaf_index,
            proof=self.log.prove_inclusion(ref.tree_id, ref.leaf_index),
            signed_root=self.log.signed_root(ref.tree_id),
        )

    def get_root(self, tree_id: int | None = None) -> SignedRoot:
        return self.log.signed_root(tree_id)

    def tree_count(self) -> int:
        return self.log.tree_count

    def get_entry(self, digest: bytes | str) -> FetchedEntry | None:
        ref = self.log.lookup(digest)
        return self._fetch(ref) if ref is not None else None

    def get_entry_at(self, tree_id: int, leaf_index: int) -> FetchedEntry:
        return self._fetch(EntryRef(tree_id=tree_id, leaf_index=leaf_index, kind=""))

    def find_attestation_by_output(self, artifact_digest: bytes) -> FetchedEntry | None:
        claim = self.log.find_attestation_by_output(artifact_digest)
        if claim is None:
            return None
        return self.get_entry(claim)

    def find_golden(self, artifact_id: str | None, digest: bytes | None = None) -> FetchedEntry | None:
        ref = None
        if artifact_id is not None:
            ref = self.log.find_golden_by_artifact_id(artifact_id)
        if ref is None and digest is not None:
            ref = self.log.find_golden_by_digest(digest)
        return self._fetch(ref) if ref is not None else None

    def get_consistency(self, tree_id: int, old_size: int, new_size: int) -> ConsistencyProof:
        return self.log.prove_consistency(tree_id, old_size, new_size)

    def get_inclusion(self, tree_id: int, leaf_index: int) -> tuple[InclusionProof, SignedRoot]:
        return self.log.prove_inclusion(tree_id, leaf_index), self.log.signed_root(tree_id)

    def submit(self, kind: str, body: Mapping[str, Any]) -> dict[str, Any]:
        if kind == ENTRY_ATTESTATION:
            ref, root = self.log.submit_attestation(TransformationAttestation.from_dict(body))
        elif kind == ENTRY_GOLDEN_VALUE:
            ref, root = self.log.submit_golden_value(GoldenValue.from_dict(body))
        elif kind == ENTRY_KEY_RECORD:
            ref, root = self.log.submit_key_record(KeyRecord.from_dict(body))
        else:
            raise AdmissionError("bad-entry", f"unsupported entry kind {kind!r}")
        return {
            "tree_id": ref.tree_id,
            "leaf_index": ref.leaf_index,
            "signed_root": root.to_dict(),
        }

    def seal(self) -> tuple[SignedRoot, SignedRoot]:
        return self.log.seal_and_chain()
