"""Training-side instrumentation for an Atlas monitor bridge."""

__version__ = "0.1.0"

from atlas_bridge.client import (
    MonitoringHandles,
    TrackedConfig,
    record_epoch_end,
    record_epoch_start,
    setup_monitoring,
)
from atlas_bridge.connection import BridgeConnection, BridgeError
from atlas_bridge.hashing import (
    event_hash,
    model_state_hash,
    optimizer_config_hash,
    optimizer_hash,
)

__all__ = [
    "BridgeConnection",
    "BridgeError",
    "MonitoringHandles",
    "TrackedConfig",
    "event_hash",
    "model_state_hash",
    "optimizer_config_hash",
    "optimizer_hash",
    "record_epoch_end",
    "record_epoch_start",
    "setup_monitoring",
]
