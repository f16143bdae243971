"""Deterministic hashing helpers matching the monitor's canonical encoding.

The bridge protocol is byte-oriented: event hashes only line up with the
manifest if both sides encode identically (UTF-8 JSON, sorted keys, no
whitespace, ms-precision UTC timestamps). This module carries the client's
half of that contract.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from typing import Any, Mapping


def canonical_json(tree: Any) -> bytes:
    return json.dumps(
        tree,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def sha256_text(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def timestamp_now() -> str:
    dt = datetime.now(timezone.utc)
    return f"{dt:%Y-%m-%dT%H:%M:%S}.{dt.microsecond // 1000:03d}Z"


def event_hash(kind: str, timestamp: str, payload: Mapping[str, Any]) -> str:
    """Hash of one monitor event exactly as the manifest embeds it."""
    return sha256_text(
        canonical_json({"kind": kind, "timestamp": timestamp, "payload": dict(payload)})
    )


def optimizer_config_hash(config: Mapping[str, Any]) -> str:
    return sha256_text(canonical_json(dict(config)))


def optimizer_hash(optimizer: Any) -> str:
    """Hash a torch optimizer's hyperparameters (everything but the params)."""
    groups = []
    for group in optimizer.param_groups:
        groups.append({k: _plain(v) for k, v in group.items() if k != "params"})
    return optimizer_config_hash(
        {"type": type(optimizer).__name__, "param_groups": groups}
    )


def _plain(value: Any) -> Any:
    if isinstance(value, (bool, int, float, str)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return repr(value)


def model_state_hash(model: Any) -> str:
    """SHA-256 over parameter tensors in sorted-name order.

    Each tensor contributes a ``name:dtype:shape`` header followed by its raw
    little-endian bytes, so any single weight perturbation changes the hash.
    """
    hasher = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        hasher.update(f"{name}:{tensor.dtype}:{tuple(tensor.shape)}\n".encode())
        hasher.update(tensor.numpy().tobytes())
    return "sha256:" + hasher.hexdigest()
