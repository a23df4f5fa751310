"""Emulated blob storage: access categories, owner metadata, at-rest
encryption under a store master key, and automated retention sweeps
driven by an injectable clock."""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .audit import AuditLog
from .authz import Principal, authorize
from .errors import (
    BlobNotFound,
    CategoryMismatch,
    DuplicateBlob,
    IntegrityError,
    KeyGenerationFailure,
    PlaintextLeakRejected,
    Unauthorized,
)

STORE_MASTER_KEY_ENV = "LOCKBOX_STORE_MASTER_KEY"

DAY = 24 * 60 * 60

# container name -> required category
CONTAINERS = {
    "documents": "encrypted-document",
    "results": "analysis-result",
}


def store_key_from_env(var: str = STORE_MASTER_KEY_ENV) -> bytes:
    raw = os.environ.get(var)
    if not raw:
        raise KeyGenerationFailure(f"{var} is not set")
    key = bytes.fromhex(raw)
    if len(key) != 32:
        raise KeyGenerationFailure(f"{var} must be 32 hex-encoded bytes")
    return key


class StoreClock:
    """Injectable time source, clamped monotone non-decreasing."""

    def __init__(self, source: Optional[Callable[[], float]] = None) -> None:
        self._source = source or time.time
        self._last = float("-inf")
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            self._last = max(self._last, self._source())
            return self._last

    @classmethod
    def manual(cls, start: float = 0.0) -> "ManualClock":
        return ManualClock(start)


class ManualClock(StoreClock):
    def __init__(self, start: float = 0.0) -> None:
        self._now = start
        super().__init__(source=lambda: self._now)

    def set(self, t: float) -> None:
        if t < self._now:
            raise ValueError("clock may not move backwards")
        self._now = t

    def advance(self, dt: float) -> None:
        self.set(self._now + dt)


@dataclass(frozen=True)
class RetentionPolicy:
    """TTL per category, seconds. Defaults: documents 7 days, results 90."""

    ttl: dict = field(
        default_factory=lambda: {
            "encrypted-document": 7 * DAY,
            "analysis-result": 90 * DAY,
        }
    )

    def __post_init__(self) -> None:
        for category, seconds in self.ttl.items():
            if seconds <= 0:
                raise ValueError(f"TTL for {category!r} must be positive")


@dataclass(frozen=True)
class BlobMeta:
    container: str
    blob_id: str
    category: str
    created_at: float
    owner: str


class ObjectStore:
    def __init__(
        self,
        data_root: Path | str,
        master_key: bytes,
        audit: AuditLog,
        clock: Optional[StoreClock] = None,
        retention: Optional[RetentionPolicy] = None,
    ) -> None:
        self._root = Path(data_root) / "store"
        self._master_key = master_key
        self._audit = audit
        self._clock = clock or StoreClock()
        self._retention = retention or RetentionPolicy()
        self._lock = threading.RLock()
        for container in CONTAINERS:
            (self._root / container).mkdir(parents=True, exist_ok=True)

    @property
    def retention(self) -> RetentionPolicy:
        return self._retention

    def _blob_path(self, container: str, blob_id: str) -> Path:
        return self._root / container / f"{blob_id}.blob"

    def _meta_path(self, container: str, blob_id: str) -> Path:
        return self._root / container / f"{blob_id}.meta.json"

    def _deny(self, caller: Principal, op: str, resource: str, correlation_id: Optional[str]) -> None:
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name, op=op, resource=resource, outcome="denied", details=details
        )

    def put_blob(
        self,
        container: str,
        blob_id: str,
        data: bytes,
        category: str,
        owner: str,
        caller: Principal,
        correlation_id: Optional[str] = None,
    ) -> None:
        resource = f"{container}/{blob_id}"
        if not authorize(caller.name, caller.roles, "put_blob", resource).allowed:
            self._deny(caller, "put_blob", resource, correlation_id)
            raise Unauthorized(f"{caller.name} may not write blobs")
        if getattr(data, "tainted", False):
            raise PlaintextLeakRejected("tainted plaintext rejected by the object store")
        if not isinstance(data, (bytes, bytearray)):
            raise PlaintextLeakRejected("object store accepts untainted raw bytes only")
        if container not in CONTAINERS or CONTAINERS[container] != category:
            raise CategoryMismatch(f"category {category!r} not allowed in container {container!r}")
        with self._lock:
            blob_path = self._blob_path(container, blob_id)
            if blob_path.exists():
                raise DuplicateBlob(f"blob {resource} already exists")
            nonce = os.urandom(12)
            sealed = AESGCM(self._master_key).encrypt(nonce, bytes(data), None)
            meta = {
                "category": category,
                "created_at": self._clock.now(),
                "owner": owner,
                "nonce": nonce.hex(),
            }
            blob_path.write_bytes(sealed)
            self._meta_path(container, blob_id).write_text(json.dumps(meta))
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name,
            op="put_blob",
            resource=resource,
            outcome="success",
            details=details,
        )

    def get_blob(
        self,
        container: str,
        blob_id: str,
        caller: Principal,
        correlation_id: Optional[str] = None,
    ) -> tuple[bytes, BlobMeta]:
        resource = f"{container}/{blob_id}"
        if not authorize(caller.name, caller.roles, "get_blob", resource).allowed:
            self._deny(caller, "get_blob", resource, correlation_id)
            raise Unauthorized(f"{caller.name} may not read blobs")
        with self._lock:
            blob_path = self._blob_path(container, blob_id)
            meta_path = self._meta_path(container, blob_id)
            if not blob_path.exists() or not meta_path.exists():
                raise BlobNotFound(f"no blob {resource}")
            raw_meta = json.loads(meta_path.read_text())
            sealed = blob_path.read_bytes()
            try:
                nonce = bytes.fromhex(raw_meta["nonce"])
                data = AESGCM(self._master_key).decrypt(nonce, sealed, None)
            except (InvalidTag, ValueError, KeyError):
                raise IntegrityError(f"at-rest record for {resource} fails verification") from None
            meta = BlobMeta(
                container=container,
                blob_id=blob_id,
                category=raw_meta["category"],
                created_at=raw_meta["created_at"],
                owner=raw_meta["owner"],
            )
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name,
            op="get_blob",
            resource=resource,
            outcome="success",
            details=details,
        )
        return data, meta

    def list_blobs(self, container: str, caller: Principal) -> list[tuple[str, BlobMeta]]:
        if not authorize(caller.name, caller.roles, "get_blob", container).allowed:
            self._deny(caller, "get_blob", container, None)
            raise Unauthorized(f"{caller.name} may not list blobs")
        if container not in CONTAINERS:
            raise CategoryMismatch(f"unknown container {container!r}")
        out = []
        with self._lock:
            for meta_path in sorted((self._root / container).glob("*.meta.json")):
                blob_id = meta_path.name[: -len(".meta.json")]
                raw = json.loads(meta_path.read_text())
                out.append(
                    (
                        blob_id,
                        BlobMeta(
                            container=container,
                            blob_id=blob_id,
                            category=raw["category"],
                            created_at=raw["created_at"],
                            owner=raw["owner"],
                        ),
                    )
                )
        return out

    def run_retention_sweep(self, now: Optional[float] = None) -> list[str]:
        """Purge every record strictly older than its category TTL."""
        now = self._clock.now() if now is None else now
        purged = []
        with self._lock:
            for container in CONTAINERS:
                for meta_path in sorted((self._root / container).glob("*.meta.json")):
                    blob_id = meta_path.name[: -len(".meta.json")]
                    try:
                        raw = json.loads(meta_path.read_text())
                        ttl = self._retention.ttl[raw["category"]]
                        if now - raw["created_at"] <= ttl:
                            continue
                        self._blob_path(container, blob_id).unlink(missing_ok=True)
                        meta_path.unlink(missing_ok=True)
                    except OSError:
                        # Retried on the next sweep.
                        self._audit.record(
                            principal="object-store",
                            op="purge",
                            resource=f"{container}/{blob_id}",
                            outcome="error",
                        )
                        continue
                    purged.append(blob_id)
                    self._audit.record(
                        principal="object-store",
                        op="purge",
                        resource=f"{container}/{blob_id}",
                        outcome="success",
                        ts=now,
                    )
        return purged
