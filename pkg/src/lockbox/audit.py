"""Append-only JSON-lines audit log.

Every identity, key, storage, and workflow operation lands here with a
gap-free sequence number. Detail values are screened so plaintext
buffers and raw key material can never reach the log.
"""

from __future__ import annotations

import dataclasses
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .crypto_envelope import DataKey, PlaintextBuffer
from .errors import AuditUnavailable, PlaintextLeakRejected

KNOWN_OPS = {
    "login",
    "createKey",
    "unwrapKey",
    "put_secret",
    "get_secret",
    "put_blob",
    "get_blob",
    "purge",
    "upload",
    "initiate_analysis",
    "get_result",
    "list_documents",
    "disable_key",
}

OUTCOMES = {"success", "denied", "error"}


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    ts: float
    principal: str
    op: str
    resource: str
    outcome: str
    details: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "AuditEvent":
        d = json.loads(line)
        return cls(
            seq=d["seq"],
            ts=d["ts"],
            principal=d["principal"],
            op=d["op"],
            resource=d["resource"],
            outcome=d["outcome"],
            details=d.get("details", {}),
        )


def _screen_details(details: Mapping[str, Any]) -> dict[str, Any]:
    clean: dict[str, Any] = {}
    for k, v in details.items():
        if isinstance(v, (PlaintextBuffer, DataKey)) or getattr(v, "tainted", False):
            raise PlaintextLeakRejected(f"tainted value for detail {k!r} rejected by audit log")
        if isinstance(v, (bytes, bytearray, memoryview)):
            raise PlaintextLeakRejected(f"raw bytes for detail {k!r} rejected by audit log")
        if not isinstance(v, (str, int, float, bool, type(None))):
            raise PlaintextLeakRejected(f"unsupported detail type for {k!r}")
        clean[str(k)] = v
    return clean


class AuditLog:
    """Single append point, fsynced per event; queries see a prefix."""

    def __init__(self, path: Path | str, clock=None) -> None:
        self._path = Path(path)
        self._lock = threading.Lock()
        self._clock = clock or time.time
        self._next_seq = 1
        self._path.parent.mkdir(parents=True, exist_ok=True)
        if self._path.exists():
            with self._path.open("r", encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        self._next_seq = AuditEvent.from_json(line).seq + 1

    @property
    def path(self) -> Path:
        return self._path

    def record(
        self,
        principal: str,
        op: str,
        resource: str,
        outcome: str,
        details: Optional[Mapping[str, Any]] = None,
        ts: Optional[float] = None,
    ) -> int:
        if op not in KNOWN_OPS:
            raise ValueError(f"unknown audit operation {op!r}")
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        clean = _screen_details(details or {})
        with self._lock:
            event = AuditEvent(
                seq=self._next_seq,
                ts=self._clock() if ts is None else ts,
                principal=principal,
                op=op,
                resource=resource,
                outcome=outcome,
                details=clean,
            )
            try:
                with self._path.open("a", encoding="utf-8") as f:
                    f.write(event.to_json() + "\n")
                    f.flush()
                    os.fsync(f.fileno())
            except OSError as exc:
                raise AuditUnavailable("audit append failed") from exc
            self._next_seq += 1
            return event.seq

    def query(
        self,
        op: Optional[str] = None,
        principal: Optional[str] = None,
        resource: Optional[str] = None,
        outcome: Optional[str] = None,
        since: Optional[float] = None,
        until: Optional[float] = None,
    ) -> list[AuditEvent]:
        if not self._path.exists():
            return []
        events = []
        with self._path.open("r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                e = AuditEvent.from_json(line)
                if op is not None and e.op != op:
                    continue
                if principal is not None and e.principal != principal:
                    continue
                if resource is not None and e.resource != resource:
                    continue
                if outcome is not None and e.outcome != outcome:
                    continue
                if since is not None and e.ts < since:
                    continue
                if until is not None and e.ts > until:
                    continue
                events.append(e)
        return events
