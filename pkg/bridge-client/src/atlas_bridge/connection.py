"""Socket connection to the monitor bridge: one JSON frame per line."""

from __future__ import annotations

import json
import socket
from typing import Any, Mapping

from atlas_bridge.hashing import canonical_json, timestamp_now

MAX_ATTEMPTS = 2  # one retry after a NACK, then surface the failure


class BridgeError(Exception):
    pass


class BridgeConnection:
    """Client side of the monitor's newline-delimited frame protocol.

    Every event emit is ACKed by the server or retried once; a second NACK
    raises. The connection keeps a record of each acknowledged event so
    callers can check them against the final manifest.
    """

    def __init__(self, socket_path: str, timeout: float = 10.0):
        self.socket_path = str(socket_path)
        self.connected = False
        self.emitted: list[dict[str, Any]] = []
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.settimeout(timeout)
        try:
            self._sock.connect(self.socket_path)
        except OSError as exc:
            raise BridgeError(
                f"cannot reach monitoring bridge at {self.socket_path}: {exc}"
            ) from exc
        self._reader = self._sock.makefile("rb")
        self.connected = True

    # -- framing ------------------------------------------------------------

    def _roundtrip(self, frame: Mapping[str, Any]) -> dict[str, Any]:
        try:
            self._sock.sendall(canonical_json(dict(frame)) + b"\n")
            line = self._reader.readline()
        except OSError as exc:
            self.connected = False
            raise BridgeError(f"bridge connection lost: {exc}") from exc
        if not line:
            self.connected = False
            raise BridgeError("bridge closed the connection")
        return json.loads(line)

    def send_control(self, control: str) -> None:
        response = self._roundtrip({"type": control})
        if not response.get("ok"):
            raise BridgeError(f"bridge refused control {control!r}: {response}")

    def emit(self, kind: str, **payload: Any) -> None:
        frame = {"type": kind, "timestamp": timestamp_now(), **payload}
        last: dict[str, Any] = {}
        for _ in range(MAX_ATTEMPTS):
            last = self._roundtrip(frame)
            if last.get("ok"):
                self.emitted.append(
                    {"kind": kind, "timestamp": frame["timestamp"], "payload": payload}
                )
                return
        raise BridgeError(f"bridge rejected {kind} after retry: {last}")

    def scan_checkpoints(self) -> None:
        self.send_control("scan_checkpoints")

    def finalize(self) -> None:
        self.send_control("finalize")

    def close(self) -> None:
        self.connected = False
        try:
            self._reader.close()
        finally:
            self._sock.close()

    def __enter__(self) -> "BridgeConnection":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()
