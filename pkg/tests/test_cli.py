import hashlib
import json
import subprocess
import sys

import pytest

from atlas.attest import save_public_key
from atlas.canonical import decode_json
from atlas.cli import main
from atlas.pipeline import build_chain, linear_stage_names, provision
from atlas.service import serve_log, start_in_thread


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli-env")
    env = provision(base / "env")
    chain = build_chain(
        env,
        stage_names=linear_stage_names(5),
        monitored_stage=None,
        seal_after=("stage-001",),
        tag="cli",
    )
    server = serve_log(env.log, port=0)
    start_in_thread(server)
    keys = base / "keys"
    keys.mkdir()
    save_public_key(env.platform.public_key, keys / "platform.pub")
    save_public_key(env.producer_identity.public_key, keys / "producer.pub")
    save_public_key(env.log.identity.public_key, keys / "log.pub")
    yield env, chain, server.url, keys
    server.shutdown()


def test_measure_empty_file(tmp_path, capsys):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    assert main(["measure", str(empty)]) == 0
    out = capsys.readouterr().out
    # digest of the empty input, recomputed independently
    assert hashlib.sha256(b"").hexdigest() in out
    assert "e3b0c44298fc1c14" in out
    assert "  0  " in out


def test_measure_json_format(tmp_path, capsys):
    f = tmp_path / "x.bin"
    f.write_bytes(b"abc")
    assert main(["measure", str(f), "--role", "code", "--format", "json"]) == 0
    tree = json.loads(capsys.readouterr().out)
    assert tree["digest"] == "sha256:" + hashlib.sha256(b"abc").hexdigest()
    assert tree["size_bytes"] == 3
    assert tree["role"] == "code"


def test_measure_missing_file_exits_3(tmp_path, capsys):
    assert main(["measure", str(tmp_path / "absent.bin")]) == 3


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as excinfo:
        main(["verify"])  # --artifact is required
    assert excinfo.value.code == 2


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as excinfo:
        main(["frobnicate"])
    assert excinfo.value.code == 2


def test_monitor_missing_dir_exits_2(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(
            [
                "monitor",
                "--dir", str(tmp_path / "nowhere"),
                "--socket", str(tmp_path / "b.sock"),
                "--out", str(tmp_path / "m.atlas.json"),
            ]
        )
    assert excinfo.value.code == 2


def test_verify_missing_platform_key_exits_2(tmp_path):
    artifact = tmp_path / "a.bin"
    artifact.write_bytes(b"x")
    with pytest.raises(SystemExit) as excinfo:
        main(
            [
                "verify",
                "--artifact", str(artifact),
                "--log", "http://127.0.0.1:1",
                "--platform-key", str(tmp_path / "missing.pub"),
            ]
        )
    assert excinfo.value.code == 2


def test_verify_pass_and_tamper(cli_env, tmp_path, capsys):
    env, chain, url, keys = cli_env
    stage = chain.stages[-1]
    expect = tmp_path / "expect.json"
    expect.write_text(json.dumps({"required_stage_order": chain.stage_names}))
    args = [
        "verify",
        "--artifact", str(stage.artifact_path),
        "--artifact-id", stage.measurement.artifact_id,
        "--expect", str(expect),
        "--log", url,
        "--platform-key", str(keys / "platform.pub"),
        "--producer-key", str(keys / "producer.pub"),
        "--log-key", str(keys / "log.pub"),
    ]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "verdict: pass" in out

    tampered = tmp_path / "tampered.bin"
    data = bytearray(stage.artifact_path.read_bytes())
    data[0] ^= 1
    tampered.write_bytes(bytes(data))
    args[2] = str(tampered)
    assert main(args) == 1
    out = capsys.readouterr().out
    assert "golden-value-mismatch" in out


def test_submit_and_duplicate(cli_env, tmp_path, capsys):
    env, chain, url, _ = cli_env
    from atlas.model import ArtifactRole, GoldenValue, measure
    from atlas.pipeline import attest_stage, deterministic_bytes

    blob = deterministic_bytes("cli-submit", 64)
    m = measure(blob, "urn:test:cli-submit", ArtifactRole.MODEL_WEIGHTS)
    env.log.submit_golden_value(GoldenValue.issue(m, env.producer_identity))
    att = attest_stage(env, "cli-submit", (), (m,), ())
    manifest = tmp_path / "manifest.atlas.json"
    att.save(manifest)

    assert main(["submit", str(manifest), "--log", url]) == 0
    assert "admitted" in capsys.readouterr().out
    assert main(["submit", str(manifest), "--log", url]) == 1
    assert "duplicate" in capsys.readouterr().err


def test_submit_env_var_fallback(cli_env, tmp_path, monkeypatch, capsys):
    env, chain, url, _ = cli_env
    monkeypatch.setenv("ATLAS_LOG_URL", url)
    missing = tmp_path / "nope.atlas.json"
    assert main(["submit", str(missing)]) == 3


def test_audit_cli(cli_env, capsys):
    _, _, url, keys = cli_env
    assert main(["audit", "--log", url, "--log-key", str(keys / "log.pub")]) == 0
    out = capsys.readouterr().out
    assert "consistent" in out


def test_attest_cli_writes_manifest(tmp_path, capsys):
    data = tmp_path / "input.bin"
    data.write_bytes(b"training data")
    out_model = tmp_path / "model.bin"
    out_model.write_bytes(b"weights")
    events = tmp_path / "events.jsonl"
    events.write_text(
        json.dumps(
            {
                "type": "epoch_start",
                "timestamp": "2026-01-01T00:00:00.000Z",
                "epoch": 1,
                "optimizer_config_hash": "sha256:" + "0" * 64,
            }
        )
        + "\n"
    )
    manifest = tmp_path / "run.atlas.json"
    code = main(
        [
            "attest",
            "--execution-name", "offline-run",
            "--identity", str(tmp_path / "id.pem"),
            "--platform-identity", str(tmp_path / "platform.pem"),
            "--input", f"dataset:urn:test:data={data}",
            "--output", f"model-weights:urn:test:model={out_model}",
            "--events", str(events),
            "--out", str(manifest),
        ]
    )
    assert code == 0
    tree = decode_json(manifest.read_bytes())
    assert tree["operations"][0]["name"] == "offline-run"
    assert len(tree["assertions"]) == 1
    assert tree["assertions"][0]["label"].endswith("epoch_start")
    assert tree["signature"] is not None


def test_attest_without_outputs_is_usage_error(tmp_path, capsys):
    code = main(
        [
            "attest",
            "--execution-name", "no-outputs",
            "--identity", str(tmp_path / "id.pem"),
            "--platform-identity", str(tmp_path / "platform.pem"),
            "--out", str(tmp_path / "m.atlas.json"),
        ]
    )
    assert code == 2
    assert "outputs" in capsys.readouterr().err


def test_demo_small_chain(tmp_path, capsys):
    code = main(
        [
            "demo",
            "--workdir", str(tmp_path / "demo"),
            "--artifacts", "6",
            "--injections", "4",
            "--seed", "11",
        ]
    )
    out = capsys.readouterr().out
    assert code == 0, out
    assert "verdict=pass" in out
    assert "detection rate: 4/4" in out


def test_console_script_runs():
    result = subprocess.run(
        [sys.executable, "-m", "atlas", "--help"], capture_output=True, text=True
    )
    assert result.returncode == 0
    for command in ("measure", "attest", "submit", "verify", "audit", "monitor", "serve-log", "demo"):
        assert command in result.stdout
