import random

import pytest

from atlas.attest import Identity
from atlas.canonical import sha256
from atlas.log import LogUnavailable
from atlas.model import ArtifactRole, measure
from atlas.pipeline import (
    TamperingLogClient,
    build_chain,
    inject_attestation_mutation,
    linear_stage_names,
    provision,
)
from atlas.verifier import (
    Expectation,
    VerificationCache,
    Verifier,
    VerifyRequest,
    audit_chain,
    invalidate,
)
from oracles import oracle_reachable


@pytest.fixture(scope="module")
def small_env(tmp_path_factory):
    env = provision(tmp_path_factory.mktemp("verifier-env"))
    chain = build_chain(
        env,
        stage_names=linear_stage_names(8),
        monitored_stage=None,
        seal_after=(),
        tag="v8",
    )
    return env, chain


def fresh_verifier(env, cache=True):
    return Verifier(env.client, env.trust, VerificationCache() if cache else None)


# -- core verdicts -----------------------------------------------------------------

def test_untampered_chain_passes(demo_env, demo_chain):
    verifier = fresh_verifier(demo_env)
    report = verifier.verify_artifact(
        demo_chain.expectation(demo_env), measurement=demo_chain.final.measurement
    )
    assert report.ok, report.failed_checks()
    assert report.chain_length == 20
    assert report.verdict == "pass"
    assert all(c.ok for c in report.checks)


def test_artifact_flip_fails_golden_value(small_env):
    env, chain = small_env
    stage = chain.stages[3]
    tampered_bytes = bytearray(stage.artifact_path.read_bytes())
    tampered_bytes[0] ^= 0x80
    tampered = measure(
        bytes(tampered_bytes), stage.measurement.artifact_id, stage.measurement.role
    )
    verifier = fresh_verifier(env)
    report = verifier.verify_artifact(
        Expectation(artifact_digest=tampered.digest), measurement=tampered
    )
    assert not report.ok
    failed = {c.name: c for c in report.failed_checks()}
    assert "golden-value" in failed
    assert "golden-value-mismatch" in failed["golden-value"].detail


def test_stage_omission_fails_stage_order(small_env):
    env, chain = small_env
    expectation = Expectation(
        artifact_digest=chain.final.measurement.digest,
        required_stage_order=tuple(chain.stage_names[:3] + ["ghost-stage"] + chain.stage_names[3:]),
    )
    report = fresh_verifier(env).verify_artifact(
        expectation, measurement=chain.final.measurement
    )
    assert not report.ok
    assert "stage-order" in report.failed_names()


def test_stage_reorder_fails_stage_order(small_env):
    env, chain = small_env
    reordered = list(chain.stage_names)
    reordered[2], reordered[5] = reordered[5], reordered[2]
    report = fresh_verifier(env).verify_artifact(
        Expectation(
            artifact_digest=chain.final.measurement.digest,
            required_stage_order=tuple(reordered),
        ),
        measurement=chain.final.measurement,
    )
    assert not report.ok
    assert "stage-order" in report.failed_names()


def test_pipeline_code_expectation(small_env):
    env, chain = small_env
    good = Expectation(
        artifact_digest=chain.final.measurement.digest,
        required_pipeline_code_hash=env.code_hash,
    )
    assert fresh_verifier(env).verify_artifact(
        good, measurement=chain.final.measurement
    ).ok
    bad = Expectation(
        artifact_digest=chain.final.measurement.digest,
        required_pipeline_code_hash=sha256(b"some other pipeline"),
    )
    report = fresh_verifier(env).verify_artifact(bad, measurement=chain.final.measurement)
    assert not report.ok
    assert "pipeline-code" in report.failed_names()


def test_required_precursors_expectation(small_env):
    env, chain = small_env
    present = Expectation(
        artifact_digest=chain.final.measurement.digest,
        required_precursor_digests=(chain.stages[0].claim_digest,),
    )
    assert fresh_verifier(env).verify_artifact(
        present, measurement=chain.final.measurement
    ).ok
    absent = Expectation(
        artifact_digest=chain.final.measurement.digest,
        required_precursor_digests=(sha256(b"never logged"),),
    )
    report = fresh_verifier(env).verify_artifact(
        absent, measurement=chain.final.measurement
    )
    assert not report.ok
    assert "precursors" in report.failed_names()


def test_unknown_artifact_fails_lineage(small_env):
    env, _ = small_env
    unknown = measure(b"nobody made this", "urn:test:unknown", ArtifactRole.MODEL_WEIGHTS)
    report = fresh_verifier(env).verify_artifact(
        Expectation(artifact_digest=unknown.digest), measurement=unknown
    )
    assert not report.ok
    failed = report.failed_names()
    assert "golden-value" in failed and "lineage" in failed


def test_log_unavailable_fails_cleanly(small_env):
    env, chain = small_env

    class DeadClient:
        def __getattr__(self, name):
            def _raise(*args, **kwargs):
                raise LogUnavailable("connection refused")

            return _raise

    verifier = Verifier(DeadClient(), env.trust, VerificationCache())
    report = verifier.verify_artifact(
        chain.expectation(env), measurement=chain.final.measurement
    )
    assert not report.ok
    assert "log-available" in report.failed_names()


def test_cycle_detected(small_env):
    env, chain = small_env
    victim = chain.stages[1]  # tampered to point at a descendant
    descendant = chain.stages[4].claim_digest

    def add_cycle(body):
        return {**body, "precursor_hashes": ["sha256:" + descendant.hex()]}

    client = TamperingLogClient(env.client, victim.claim_digest, add_cycle)
    verifier = Verifier(client, env.trust, cache=None)
    report = verifier.verify_artifact(
        Expectation(artifact_digest=chain.final.measurement.digest),
        measurement=chain.final.measurement,
    )
    assert not report.ok
    details = " ".join(c.detail for c in report.failed_checks())
    assert "cycle-detected" in details


# -- served-entry tampering ----------------------------------------------------------

def test_mutated_entry_fails_inclusion_proof(small_env):
    env, chain = small_env
    result = inject_attestation_mutation(env, chain, random.Random(1))
    assert result.detected
    assert "inclusion-proof" in result.report.failed_names()


def test_resigned_head_fails_quote_binding(small_env):
    env, chain = small_env
    attacker = Identity.generate()
    env.log.submit_key_record(attacker.record)

    def resign(body):
        from atlas.model import TransformationAttestation

        mutated = dict(body)
        mutated["manifest_id"] = mutated["manifest_id"] + "-own"
        unsigned = dict(mutated)
        unsigned["signature"] = None
        attestation = TransformationAttestation.from_dict(unsigned).signed(attacker)
        return attestation.to_dict()

    client = TamperingLogClient(env.client, chain.final.claim_digest, resign)
    report = Verifier(client, env.trust, cache=None).verify_artifact(
        Expectation(artifact_digest=chain.final.measurement.digest),
        measurement=chain.final.measurement,
    )
    assert not report.ok
    assert "quote-binding" in report.failed_names()


def test_mutated_head_claim_fails_signature(small_env):
    env, chain = small_env

    def mutate(body):
        return {**body, "manifest_id": body["manifest_id"] + "-edited"}

    client = TamperingLogClient(env.client, chain.final.claim_digest, mutate)
    report = Verifier(client, env.trust, cache=None).verify_artifact(
        Expectation(artifact_digest=chain.final.measurement.digest),
        measurement=chain.final.measurement,
    )
    assert not report.ok
    assert "attestation-signature" in report.failed_names()


def test_soundness_sample_of_field_mutations(small_env):
    env, chain = small_env
    rng = random.Random(99)
    for _ in range(25):
        result = inject_attestation_mutation(env, chain, rng)
        assert not result.report.ok, result.detail


# -- cache ---------------------------------------------------------------------------

def test_cache_replays_identical_checks(small_env):
    env, chain = small_env
    cache = VerificationCache()
    verifier = Verifier(env.client, env.trust, cache)
    expectation = chain.expectation(env)
    cold = verifier.verify_artifact(expectation, measurement=chain.final.measurement)
    warm = verifier.verify_artifact(expectation, measurement=chain.final.measurement)
    assert cold.verdict == warm.verdict == "pass"
    assert cold.chain_length == warm.chain_length
    assert [(c.name, c.status, c.detail) for c in cold.checks] == [
        (c.name, c.status, c.detail) for c in warm.checks
    ]
    assert not any(c.cache_hit for c in cold.checks)
    hop_checks = [c for c in warm.checks if c.name in (
        "log-root-signature", "inclusion-proof", "attestation-signature", "quote-binding", "quote"
    )]
    assert hop_checks and all(c.cache_hit for c in hop_checks)


def test_cache_transparency_on_attacks(small_env):
    env, chain = small_env
    from atlas.pipeline import _mutations

    expectation = chain.expectation(env)
    rng_a, rng_b = random.Random(5), random.Random(5)
    for _ in range(10):
        client_a = TamperingLogClient(
            env.client, rng_a.choice(chain.stages).claim_digest, _mutations(rng_a)
        )
        uncached = Verifier(client_a, env.trust, cache=None).verify_artifact(
            expectation, measurement=chain.final.measurement
        )
        client_b = TamperingLogClient(
            env.client, rng_b.choice(chain.stages).claim_digest, _mutations(rng_b)
        )
        cache = VerificationCache()
        cached_verifier = Verifier(client_b, env.trust, cache)
        first = cached_verifier.verify_artifact(
            expectation, measurement=chain.final.measurement
        )
        replay = cached_verifier.verify_artifact(
            expectation, measurement=chain.final.measurement
        )
        # same rng draws → same attack; caching never changes the verdict
        assert uncached.verdict == first.verdict == replay.verdict == "fail"
        assert uncached.failed_names() <= first.failed_names() | {"lineage"}


def test_cache_entries_survive_root_advance(small_env, platform):
    env, chain = small_env
    cache = VerificationCache()
    verifier = Verifier(env.client, env.trust, cache)
    expectation = chain.expectation(env)
    verifier.verify_artifact(expectation, measurement=chain.final.measurement)
    populated = len(cache)

    # grow the log: the pinned roots must revalidate via one consistency proof
    extension = build_chain(
        env,
        stage_names=["other-a", "other-b"],
        monitored_stage=None,
        seal_after=(),
        tag="ext",
    )
    warm = verifier.verify_artifact(expectation, measurement=chain.final.measurement)
    assert warm.ok
    hop_checks = [c for c in warm.checks if c.name == "attestation-signature"]
    assert all(c.cache_hit for c in hop_checks)
    assert len(cache) >= populated


def test_invalidate_leaf_evicts_one(small_env):
    env, chain = small_env
    cache = VerificationCache()
    verifier = Verifier(env.client, env.trust, cache)
    verifier.verify_artifact(chain.expectation(env), measurement=chain.final.measurement)
    evicted = invalidate(cache, chain.final.claim_digest)
    assert evicted == 1  # the chain head has no dependents


def test_invalidate_root_ancestor_matches_reachability_oracle(tmp_path):
    env = provision(tmp_path / "inv-env")
    chain = build_chain(
        env, stage_names=linear_stage_names(20), monitored_stage=None, seal_after=(), tag="inv"
    )
    cache = VerificationCache()
    verifier = Verifier(env.client, env.trust, cache)
    verifier.verify_artifact(
        Expectation(artifact_digest=chain.final.measurement.digest),
        measurement=chain.final.measurement,
    )
    assert len(cache) == 20
    # oracle: dependents via explicit reverse edges
    edges: dict[bytes, list[bytes]] = {}
    for earlier, later in zip(chain.stages, chain.stages[1:]):
        edges.setdefault(earlier.claim_digest, []).append(later.claim_digest)
    expected = oracle_reachable(edges, chain.stages[0].claim_digest)
    evicted = invalidate(cache, chain.stages[0].claim_digest)
    assert evicted == len(expected) == 20
    assert len(cache) == 0


def test_invalidate_preserves_sibling_branch(tmp_path):
    env = provision(tmp_path / "sib-env")
    trunk = build_chain(
        env, stage_names=["root-stage"], monitored_stage=None, seal_after=(), tag="trunk"
    )
    # two sibling branches on the same trunk
    from atlas.model import GoldenValue
    from atlas.pipeline import attest_stage, deterministic_bytes

    branches = {}
    for branch in ("left", "right"):
        path = env.workdir / f"{branch}.bin"
        path.write_bytes(deterministic_bytes(branch, 128))
        m = measure(path.read_bytes(), f"urn:test:{branch}", ArtifactRole.MODEL_WEIGHTS)
        env.log.submit_golden_value(GoldenValue.issue(m, env.producer_identity))
        att = attest_stage(
            env, f"{branch}-stage", (trunk.final.measurement,), (m,),
            (trunk.final.claim_digest,),
        )
        env.log.submit_attestation(att)
        branches[branch] = (m, att)

    cache = VerificationCache()
    verifier = Verifier(env.client, env.trust, cache)
    for m, _ in branches.values():
        assert verifier.verify_artifact(
            Expectation(artifact_digest=m.digest), measurement=m
        ).ok
    assert len(cache) == 3  # trunk + two branches

    evicted = invalidate(cache, branches["left"][1].claim_digest())
    assert evicted == 1
    # the sibling branch still replays from cache
    report = verifier.verify_artifact(
        Expectation(artifact_digest=branches["right"][0].digest),
        measurement=branches["right"][0],
    )
    assert report.ok
    sig_checks = [c for c in report.checks if c.name == "attestation-signature"]
    assert all(c.cache_hit for c in sig_checks)


def test_invalidate_unknown_digest_is_noop(small_env):
    cache = VerificationCache()
    assert invalidate(cache, sha256(b"never cached")) == 0


# -- batching --------------------------------------------------------------------------

def test_batch_shares_common_lineage(tmp_path):
    env = provision(tmp_path / "batch-env")
    base = build_chain(
        env, stage_names=linear_stage_names(6), monitored_stage=None, seal_after=(), tag="base"
    )
    from atlas.model import GoldenValue
    from atlas.pipeline import attest_stage, deterministic_bytes

    heads = []
    for i in range(5):
        path = env.workdir / f"fork-{i}.bin"
        path.write_bytes(deterministic_bytes(f"fork-{i}", 128))
        m = measure(path.read_bytes(), f"urn:test:fork{i}", ArtifactRole.MODEL_WEIGHTS)
        env.log.submit_golden_value(GoldenValue.issue(m, env.producer_identity))
        att = attest_stage(
            env, f"fork-{i}", (base.final.measurement,), (m,), (base.final.claim_digest,)
        )
        env.log.submit_attestation(att)
        heads.append(m)

    verifier = Verifier(env.client, env.trust, VerificationCache())
    requests = [
        VerifyRequest(expectation=Expectation(artifact_digest=m.digest), measurement=m)
        for m in heads
    ]
    reports = verifier.verify_batch(requests)
    assert all(r.ok for r in reports)
    assert all(r.chain_length == 7 for r in reports)
    # the shared base subchain is verified once: later reports replay it
    def base_hits(report):
        return [
            c.cache_hit
            for c in report.checks
            if c.name == "attestation-signature"
        ]

    assert not any(base_hits(reports[0])[:-1])  # first request verified the trunk
    for report in reports[1:]:
        hits = base_hits(report)
        assert all(hits[:-1])  # six shared hops replayed
        assert not hits[-1]  # its own head was fresh


def test_batch_equals_sequential_modulo_cache_flags(tmp_path):
    env = provision(tmp_path / "batch-eq-env")
    chains = [
        build_chain(
            env,
            stage_names=[f"c{i}-a", f"c{i}-b", f"c{i}-c"],
            monitored_stage=None,
            seal_after=(),
            tag=f"c{i}",
        )
        for i in range(3)
    ]
    requests = [
        VerifyRequest(
            expectation=c.expectation(env), measurement=c.final.measurement
        )
        for c in chains
    ]
    sequential = [
        Verifier(env.client, env.trust, VerificationCache()).verify_artifact(
            r.expectation, measurement=r.measurement
        )
        for r in requests
    ]
    batched = Verifier(env.client, env.trust, VerificationCache()).verify_batch(requests)
    for seq, bat in zip(sequential, batched):
        assert seq.verdict == bat.verdict
        assert seq.chain_length == bat.chain_length
        assert [(c.name, c.status) for c in seq.checks] == [
            (c.name, c.status) for c in bat.checks
        ]


def test_batch_isolates_failures(small_env):
    env, chain = small_env
    good = VerifyRequest(
        expectation=chain.expectation(env), measurement=chain.final.measurement
    )
    missing = measure(b"missing artifact", "urn:test:void", ArtifactRole.MODEL_WEIGHTS)
    bad = VerifyRequest(
        expectation=Expectation(artifact_digest=missing.digest), measurement=missing
    )
    reports = Verifier(env.client, env.trust, VerificationCache()).verify_batch(
        [good, bad, good]
    )
    assert [r.ok for r in reports] == [True, False, True]


# -- tree-chain audit ---------------------------------------------------------------

class RootTamperingClient:
    """Serves an altered (re-signed) root for one tree."""

    def __init__(self, inner, tree_id: int, log_identity):
        self.inner = inner
        self.tree_id = tree_id
        self.log_identity = log_identity

    def get_root(self, tree_id=None):
        root = self.inner.get_root(tree_id)
        if root.tree_id != self.tree_id:
            return root
        from atlas.canonical import canonical_json as cj
        from atlas.log import SignedRoot

        altered = bytearray(root.root)
        altered[0] ^= 0xFF
        body = {
            "tree_id": root.tree_id,
            "tree_size": root.tree_size,
            "root": "sha256:" + bytes(altered).hex(),
        }
        return SignedRoot(
            tree_id=root.tree_id,
            tree_size=root.tree_size,
            root=bytes(altered),
            log_signature=self.log_identity.sign_claim(cj(body)),
        )

    def __getattr__(self, name):
        return getattr(self.inner, name)


def test_audit_clean_chain(demo_env, demo_chain):
    report = audit_chain(demo_env.client, demo_env.trust)
    assert report.ok
    assert report.tree_count == 3
    names = [c.name for c in report.checks]
    assert "link[1]" in names and "link[2]" in names


@pytest.mark.parametrize("altered_tree", [0, 1, 2])
def test_audit_detects_altered_root_at_first_affected_link(
    demo_env, demo_chain, altered_tree
):
    client = RootTamperingClient(demo_env.client, altered_tree, demo_env.log.identity)
    report = audit_chain(client, demo_env.trust)
    assert not report.ok
    failing = [c.name for c in report.checks if not c.ok]
    expected_link = f"link[{max(altered_tree, 1)}]"
    assert failing[0] == expected_link
    earlier = report.checks[: [c.name for c in report.checks].index(expected_link)]
    assert all(c.ok for c in earlier)


def test_audit_detects_unsigned_root_alteration(demo_env, demo_chain):
    class CrudeTamper:
        def __init__(self, inner):
            self.inner = inner

        def get_root(self, tree_id=None):
            root = self.inner.get_root(tree_id)
            if root.tree_id == 1:
                altered = bytearray(root.root)
                altered[5] ^= 1
                from atlas.log import SignedRoot

                return SignedRoot(
                    tree_id=root.tree_id,
                    tree_size=root.tree_size,
                    root=bytes(altered),
                    log_signature=root.log_signature,  # stale signature
                )
            return root

        def __getattr__(self, name):
            return getattr(self.inner, name)

    report = audit_chain(CrudeTamper(demo_env.client), demo_env.trust)
    assert not report.ok
    failing = [c.name for c in report.checks if not c.ok]
    assert failing[0] == "root-signature[1]"


def test_audit_checkpoint_consistency(demo_env, demo_chain):
    pinned = demo_env.client.get_root(2)
    build_chain(
        demo_env,
        stage_names=["post-audit-stage"],
        monitored_stage=None,
        seal_after=(),
        tag="post-audit",
    )
    report = audit_chain(demo_env.client, demo_env.trust, checkpoints=[pinned])
    assert report.ok
    assert any(c.name.startswith("consistency[2@") for c in report.checks)
