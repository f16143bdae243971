import os

import pytest

from atlas import merkle
from atlas.attest import Identity, TeePlatform
from atlas.canonical import (
    blob_from_text,
    blob_to_text,
    canonical_json,
    decode_json,
    sha256,
    utc_now,
)
from atlas.log import (
    AdmissionError,
    DirectLogClient,
    ENTRY_CHAIN_LINK,
    LogError,
    TransparencyLog,
    TreeSealedError,
    TreeState,
)
from atlas.model import (
    ArtifactMeasurement,
    ArtifactRole,
    GoldenValue,
    OperationRecord,
    PipelineMetadata,
    TransformationAttestation,
    measure,
)


def make_attestation(
    platform: TeePlatform,
    identity: Identity,
    tag: str,
    precursors: tuple[bytes, ...] = (),
    inputs: tuple[ArtifactMeasurement, ...] = (),
    operations: int = 1,
    sign_with: Identity | None = None,
    env_hash: bytes | None = None,
) -> TransformationAttestation:
    output = measure(f"artifact {tag}".encode(), f"urn:test:{tag}", ArtifactRole.MODEL_WEIGHTS)
    now = utc_now()
    quote = platform.issue_quote(
        env_hash if env_hash is not None else bytes(32),
        bytes(32),
        os.urandom(32),
        identity.record,
    )
    metadata = PipelineMetadata(tag, {}, (), quote)
    att = TransformationAttestation(
        manifest_id=f"urn:test:manifest:{tag}",
        inputs=inputs,
        outputs=(output,),
        operations=tuple(
            OperationRecord(f"{tag}-op{i}", bytes(32), now, now) for i in range(operations)
        ),
        precursor_hashes=precursors,
        pipeline_metadata_hash=sha256(metadata.canonical_bytes()),
        client_quote=quote,
    )
    return att.signed(sign_with or identity)


@pytest.fixture
def log_setup(platform, client_identity, trust):
    log = TransparencyLog(log_dir=None, trust=trust)
    log.submit_key_record(client_identity.record)
    return log, platform, client_identity


def test_submit_appends_rightmost(log_setup):
    log, platform, identity = log_setup
    base = log.active_tree.size
    ref, root = log.submit_attestation(make_attestation(platform, identity, "a"))
    assert ref.leaf_index == base
    assert root.tree_size == base + 1
    assert root.verify(log.identity.public_key)


def test_submit_unsigned_rejected(log_setup):
    log, platform, identity = log_setup
    att = make_attestation(platform, identity, "unsigned")
    tree = att.to_dict()
    tree["signature"] = None
    unsigned = TransformationAttestation.from_dict(tree)
    size = log.active_tree.size
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(unsigned)
    assert excinfo.value.reason == "bad-signature"
    assert log.active_tree.size == size  # nothing appended


def test_submit_unknown_signer_rejected(log_setup):
    log, platform, _ = log_setup
    stranger = Identity.generate()
    att = make_attestation(platform, stranger, "stranger")
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(att)
    assert excinfo.value.reason == "bad-signature"


def test_submit_corrupted_signature_rejected(log_setup):
    log, platform, identity = log_setup
    att = make_attestation(platform, identity, "corrupt")
    tree = att.to_dict()
    raw = bytearray(blob_from_text(tree["signature"]["sig"]))
    raw[0] ^= 0x01
    tree["signature"]["sig"] = blob_to_text(bytes(raw))
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(TransformationAttestation.from_dict(tree))
    assert excinfo.value.reason == "bad-signature"


def test_submit_resigned_by_other_key_rejected_via_binding(log_setup):
    log, platform, identity = log_setup
    other = Identity.generate()
    log.submit_key_record(other.record)
    # claim quotes `identity` but is (validly) signed by `other`: the
    # signature itself verifies, so the quote binding is what rejects it
    att = make_attestation(platform, identity, "mixed", sign_with=other)
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(att)
    assert excinfo.value.reason == "quote-invalid"


def test_submit_foreign_platform_rejected(log_setup):
    log, _, identity = log_setup
    rogue = TeePlatform()
    att = make_attestation(rogue, identity, "rogue")
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(att)
    assert excinfo.value.reason == "quote-invalid"


def test_submit_quote_not_binding_signer_rejected(log_setup):
    log, platform, identity = log_setup
    other = Identity.generate()
    log.submit_key_record(other.record)
    # quote attests `identity` but the claim is signed (validly) by `other`
    output = measure(b"x", "urn:test:bind", ArtifactRole.MODEL_WEIGHTS)
    now = utc_now()
    quote = platform.issue_quote(bytes(32), bytes(32), os.urandom(32), identity.record)
    att = TransformationAttestation(
        manifest_id="urn:test:manifest:bind",
        inputs=(),
        outputs=(output,),
        operations=(OperationRecord("op", bytes(32), now, now),),
        precursor_hashes=(),
        pipeline_metadata_hash=bytes(32),
        client_quote=quote,
    ).signed(other)
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(att)
    assert excinfo.value.reason == "quote-invalid"


def test_submit_register_mismatch_rejected(platform, client_identity, producer_identity, trust):
    goldens = [
        GoldenValue.issue(
            ArtifactMeasurement("urn:atlas:platform:environment", ArtifactRole.METADATA, sha256(b"good env"), 0),
            producer_identity,
        ),
        GoldenValue.issue(
            ArtifactMeasurement("urn:atlas:platform:code-image", ArtifactRole.METADATA, bytes(32), 0),
            producer_identity,
        ),
    ]
    trust.set_register_goldens(goldens)
    log = TransparencyLog(log_dir=None, trust=trust)
    log.submit_key_record(client_identity.record)
    att = make_attestation(platform, client_identity, "drift", env_hash=sha256(b"evil env"))
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(att)
    assert excinfo.value.reason == "quote-invalid"
    ok = make_attestation(platform, client_identity, "clean", env_hash=sha256(b"good env"))
    log.submit_attestation(ok)


def test_submit_unknown_precursor_rejected(log_setup):
    log, platform, identity = log_setup
    att = make_attestation(platform, identity, "orphan", precursors=(os.urandom(32),))
    size = log.active_tree.size
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(att)
    assert excinfo.value.reason == "unknown-precursor"
    assert log.active_tree.size == size


def test_submit_empty_operations_rejected(log_setup):
    log, platform, identity = log_setup
    same = measure(b"republished", "urn:test:repub", ArtifactRole.DATASET)
    quote = platform.issue_quote(bytes(32), bytes(32), os.urandom(32), identity.record)
    att = TransformationAttestation(
        manifest_id="urn:test:manifest:repub",
        inputs=(same,),
        outputs=(same,),
        operations=(),
        precursor_hashes=(),
        pipeline_metadata_hash=bytes(32),
        client_quote=quote,
    ).signed(identity)
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(att)
    assert excinfo.value.reason == "empty-operations"


def test_submit_duplicate_rejected(log_setup):
    log, platform, identity = log_setup
    att = make_attestation(platform, identity, "dup")
    log.submit_attestation(att)
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_attestation(att)
    assert excinfo.value.reason == "duplicate"


def test_twenty_sequential_submissions_all_provable(log_setup):
    log, platform, identity = log_setup
    base = log.active_tree.size
    previous: tuple[bytes, ...] = ()
    refs = []
    for i in range(20):
        att = make_attestation(platform, identity, f"s{i}", precursors=previous)
        ref, _ = log.submit_attestation(att)
        refs.append(ref)
        previous = (att.claim_digest(),)
    assert [r.leaf_index for r in refs] == list(range(base, base + 20))
    root = log.signed_root(0)
    for ref in refs:
        proof = log.prove_inclusion(0, ref.leaf_index)
        leaf = merkle.leaf_hash(log.entry_bytes(ref))
        assert proof.verify(leaf, root.root)


def test_twenty_submissions_into_chained_tree_start_at_one(log_setup):
    log, platform, identity = log_setup
    log.submit_attestation(make_attestation(platform, identity, "seed"))
    log.seal_and_chain()
    # the successor tree's leaf 0 is the chain link, so entries land at 1..20
    refs = []
    previous: tuple[bytes, ...] = ()
    for i in range(20):
        att = make_attestation(platform, identity, f"chained{i}", precursors=previous)
        ref, _ = log.submit_attestation(att)
        refs.append(ref)
        previous = (att.claim_digest(),)
    assert [r.leaf_index for r in refs] == list(range(1, 21))
    root = log.signed_root(1)
    for ref in refs:
        proof = log.prove_inclusion(1, ref.leaf_index)
        assert proof.verify(merkle.leaf_hash(log.entry_bytes(ref)), root.root)


def test_concurrent_submissions_serialize(log_setup):
    import threading

    log, platform, identity = log_setup
    base = log.active_tree.size
    attestations = [
        make_attestation(platform, identity, f"conc{i}") for i in range(24)
    ]
    results: list = [None] * len(attestations)

    def submit(index: int) -> None:
        results[index] = log.submit_attestation(attestations[index])[0]

    threads = [
        threading.Thread(target=submit, args=(i,)) for i in range(len(attestations))
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    indices = sorted(r.leaf_index for r in results)
    assert indices == list(range(base, base + 24))  # one append each, no gaps
    root = log.signed_root(0)
    for ref in results:
        proof = log.prove_inclusion(0, ref.leaf_index)
        assert proof.verify(merkle.leaf_hash(log.entry_bytes(ref)), root.root)


def test_entry_retrievable_iff_submitted(log_setup):
    log, platform, identity = log_setup
    good = make_attestation(platform, identity, "kept")
    log.submit_attestation(good)
    assert log.get_attestation(good.claim_digest()) == good
    rejected = make_attestation(platform, identity, "lost", precursors=(os.urandom(32),))
    with pytest.raises(AdmissionError):
        log.submit_attestation(rejected)
    assert log.get_attestation(rejected.claim_digest()) is None
    assert log.lookup(rejected.claim_digest()) is None


# -- sealing and chaining -----------------------------------------------------

def test_seal_and_chain_embeds_predecessor_root(log_setup):
    log, platform, identity = log_setup
    log.submit_attestation(make_attestation(platform, identity, "pre-seal"))
    expected_root = log.tree(0).root()
    sealed, opened = log.seal_and_chain()
    assert sealed.tree_id == 0 and opened.tree_id == 1
    assert sealed.root == expected_root
    leaf0 = decode_json(log.entry_bytes(log.lookup(sha256(log.tree(1).entries[0]))))
    assert leaf0["kind"] == ENTRY_CHAIN_LINK
    assert leaf0["body"]["predecessor_root"] == "sha256:" + expected_root.hex()
    assert leaf0["body"]["predecessor_tree_id"] == 0
    assert log.tree(0).sealed and not log.tree(1).sealed


def test_append_to_sealed_tree_fails():
    tree = TreeState(tree_id=0)
    tree.append(b"entry")
    tree.seal()
    with pytest.raises(TreeSealedError):
        tree.append(b"more")


def test_seal_empty_tree_fails(trust):
    log = TransparencyLog(log_dir=None, trust=trust)
    with pytest.raises(LogError):
        log.seal_and_chain()


def test_three_tree_chain_walk_recovers_roots(log_setup):
    log, platform, identity = log_setup
    roots = []
    for round_no in range(3):
        log.submit_attestation(make_attestation(platform, identity, f"round{round_no}"))
        if round_no < 2:
            sealed, _ = log.seal_and_chain()
            roots.append(sealed.root)
    assert log.tree_count == 3
    # walking the chain links recovers the sealed roots in order
    recovered = []
    for tree_id in range(1, log.tree_count):
        leaf0 = decode_json(log.tree(tree_id).entries[0])
        assert leaf0["kind"] == ENTRY_CHAIN_LINK
        recovered.append(leaf0["body"]["predecessor_root"])
    assert recovered == ["sha256:" + r.hex() for r in roots]


def test_chain_altering_sealed_leaf_breaks_replay(tmp_path, platform, client_identity, trust):
    log_dir = tmp_path / "log"
    log = TransparencyLog(log_dir=log_dir, trust=trust)
    log.submit_key_record(client_identity.record)
    log.submit_attestation(make_attestation(platform, client_identity, "t0"))
    log.seal_and_chain()
    log.submit_attestation(make_attestation(platform, client_identity, "t1"))

    tree0 = log_dir / "tree-00000.log"
    lines = tree0.read_bytes().splitlines()
    envelope = decode_json(lines[-1])
    envelope["body"]["manifest_id"] = "urn:test:manifest:rewritten"
    lines[-1] = canonical_json(envelope)
    tree0.write_bytes(b"\n".join(lines) + b"\n")

    with pytest.raises(LogError):
        TransparencyLog(log_dir=log_dir, trust=trust)


# -- persistence ----------------------------------------------------------------

def test_replay_rebuilds_state(tmp_path, platform, client_identity, producer_identity, trust):
    log_dir = tmp_path / "log"
    log = TransparencyLog(log_dir=log_dir, trust=trust)
    log.submit_key_record(client_identity.record)
    golden = GoldenValue.issue(
        measure(b"data", "urn:test:data", ArtifactRole.DATASET), producer_identity
    )
    log.submit_golden_value(golden)
    atts = []
    previous: tuple[bytes, ...] = ()
    for i in range(5):
        att = make_attestation(platform, client_identity, f"p{i}", precursors=previous)
        log.submit_attestation(att)
        previous = (att.claim_digest(),)
        if i == 2:
            log.seal_and_chain()
        atts.append(att)
    roots = [log.signed_root(t).root for t in range(log.tree_count)]

    reopened = TransparencyLog(log_dir=log_dir, trust=trust, identity=log.identity)
    assert reopened.tree_count == log.tree_count
    assert [reopened.signed_root(t).root for t in range(reopened.tree_count)] == roots
    for att in atts:
        assert reopened.get_attestation(att.claim_digest()) == att
    ref = reopened.find_golden_by_artifact_id("urn:test:data")
    assert ref is not None
    assert reopened.resolve_signer_key(client_identity.key_id) == client_identity.record
    # append-only file replay keeps accepting new entries
    reopened.submit_attestation(
        make_attestation(platform, client_identity, "after-reopen", precursors=previous)
    )


# -- golden values and key records ------------------------------------------------

def test_golden_requires_known_producer(log_setup, producer_identity):
    log, _, _ = log_setup
    golden = GoldenValue.issue(
        measure(b"g", "urn:test:g", ArtifactRole.DATASET), Identity.generate()
    )
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_golden_value(golden)
    assert excinfo.value.reason == "bad-signature"


def test_golden_signature_must_verify(log_setup, producer_identity):
    log, _, _ = log_setup
    golden = GoldenValue.issue(
        measure(b"g", "urn:test:g", ArtifactRole.DATASET), producer_identity
    )
    tree = golden.to_dict()
    tree["measurement"]["size_bytes"] = 999  # signed bytes no longer match
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_golden_value(GoldenValue.from_dict(tree))
    assert excinfo.value.reason == "bad-signature"


def test_golden_duplicate_artifact_id_rejected(log_setup, producer_identity):
    log, _, _ = log_setup
    golden = GoldenValue.issue(
        measure(b"g1", "urn:test:gold", ArtifactRole.DATASET), producer_identity
    )
    log.submit_golden_value(golden)
    second = GoldenValue.issue(
        measure(b"g2", "urn:test:gold", ArtifactRole.DATASET), producer_identity
    )
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_golden_value(second)
    assert excinfo.value.reason == "duplicate"


def test_key_record_duplicate_rejected(log_setup):
    log, _, identity = log_setup
    with pytest.raises(AdmissionError) as excinfo:
        log.submit_key_record(identity.record)
    assert excinfo.value.reason == "duplicate"


def test_lookup_resolution(log_setup, producer_identity):
    log, platform, identity = log_setup
    att = make_attestation(platform, identity, "look")
    log.submit_attestation(att)
    claim = att.claim_digest()
    assert log.lookup(claim).kind == "attestation"
    assert log.lookup(claim.hex()).kind == "attestation"
    assert log.lookup("sha256:" + claim.hex()).kind == "attestation"
    assert log.lookup(identity.key_id).kind == "key-record"
    assert log.lookup(os.urandom(32)) is None
    assert log.find_attestation_by_output(att.outputs[0].digest) == claim


def test_direct_client_round_trip(log_setup):
    log, platform, identity = log_setup
    client = DirectLogClient(log)
    att = make_attestation(platform, identity, "client")
    result = client.submit("attestation", att.to_dict())
    fetched = client.get_entry(att.claim_digest())
    assert fetched is not None
    assert fetched.leaf_index == result["leaf_index"]
    assert fetched.proof.verify(
        merkle.leaf_hash(fetched.entry_bytes), fetched.signed_root.root
    )
