"""PyTorch instrumentation: hooks, epoch callbacks, tracked configuration.

`setup_monitoring` attaches forward hooks to every leaf layer and gradient
hooks to every trainable parameter, wraps the run configuration so reads and
writes become events, and asks the monitor to scan pre-existing checkpoints.
All observers are read-only: an instrumented model computes bit-identical
outputs to an uninstrumented one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import torch

from atlas_bridge.connection import BridgeConnection
from atlas_bridge.hashing import model_state_hash, optimizer_config_hash, optimizer_hash


class TrackedConfig:
    """Configuration proxy: get logs an access, set bumps a version."""

    def __init__(self, connection: BridgeConnection, entries: Mapping[str, Any] | None = None):
        self._connection = connection
        self._entries = dict(entries or {})
        self.version = 0

    def get(self, key: str) -> Any:
        found = key in self._entries
        self._connection.emit("config_access", key=key, found=found)
        return self._entries.get(key)

    def set(self, key: str, value: Any) -> None:
        old = self._entries.get(key)
        self._entries[key] = value
        self.version += 1
        self._connection.emit(
            "config_update", key=key, old=old, new=value, version=self.version
        )

    def snapshot(self) -> dict[str, Any]:
        return dict(self._entries)


def _tensor_stats(output: torch.Tensor) -> dict[str, Any]:
    with torch.no_grad():
        data = output.detach()
        return {
            "mean": float(data.mean()),
            "std": float(data.std()) if data.numel() > 1 else 0.0,
            "min": float(data.min()),
            "max": float(data.max()),
            "numel": int(data.numel()),
        }


@dataclass
class MonitoringHandles:
    """Everything `setup_monitoring` attached; `detach()` removes the hooks."""

    connection: BridgeConnection
    config: TrackedConfig
    forward_hooks: list = field(default_factory=list)
    gradient_hooks: list = field(default_factory=list)

    def detach(self) -> None:
        for handle in self.forward_hooks + self.gradient_hooks:
            handle.remove()
        self.forward_hooks.clear()
        self.gradient_hooks.clear()


def _is_leaf_layer(module: torch.nn.Module) -> bool:
    return len(list(module.children())) == 0 and len(list(module.parameters(recurse=False))) >= 0


def setup_monitoring(
    model: torch.nn.Module,
    config: Mapping[str, Any],
    checkpoint_dir: str | None,
    connection: BridgeConnection,
) -> MonitoringHandles:
    """Attach activation and gradient observers and start config tracking.

    The checkpoint directory itself is watched server-side; this only
    triggers the initial scan so pre-existing files get registered.
    """
    handles = MonitoringHandles(
        connection=connection, config=TrackedConfig(connection, config)
    )

    def make_forward_hook(layer_id: str):
        def forward_hook(module, inputs, output):
            tensor = output[0] if isinstance(output, tuple) else output
            if isinstance(tensor, torch.Tensor):
                connection.emit(
                    "layer_activation", layer_id=layer_id, stats=_tensor_stats(tensor)
                )
            return None  # observation only, never rewrites the output

        return forward_hook

    def gradient_hook(grad: torch.Tensor):
        with torch.no_grad():
            magnitude = float(grad.detach().norm(2))
        connection.emit("gradient", magnitude=magnitude, norm="l2")
        return None  # leaves the gradient untouched

    for name, module in model.named_modules():
        if name and _is_leaf_layer(module):
            handles.forward_hooks.append(
                module.register_forward_hook(make_forward_hook(name))
            )
    for name, parameter in model.named_parameters():
        if parameter.requires_grad:
            handles.gradient_hooks.append(parameter.register_hook(gradient_hook))

    connection.scan_checkpoints()
    return handles


def record_epoch_start(
    connection: BridgeConnection, epoch: int, optimizer_config: Any
) -> None:
    """Emit the epoch boundary with a hash of the optimizer configuration."""
    if isinstance(optimizer_config, Mapping):
        config_hash = optimizer_config_hash(optimizer_config)
    else:
        config_hash = optimizer_hash(optimizer_config)
    connection.emit("epoch_start", epoch=epoch, optimizer_config_hash=config_hash)


def record_epoch_end(
    connection: BridgeConnection,
    epoch: int,
    metrics: Mapping[str, float],
    model: torch.nn.Module,
) -> None:
    """Emit epoch completion with metrics and the model state snapshot hash."""
    connection.emit(
        "epoch_end",
        epoch=epoch,
        metrics=dict(metrics),
        model_state_hash=model_state_hash(model),
    )
