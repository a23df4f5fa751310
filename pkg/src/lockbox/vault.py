"""Local emulation of the two key vaults.

Vault-A holds non-exportable RSA key pairs and performs unwrapKey
internally; Vault-B stores wrapped data keys as opaque secrets. Both
persist to disk encrypted under a vault master key, so a raw disk read
never yields key material. Every operation is authorized against the
RBAC matrix and audited.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import crypto_envelope
from .audit import AuditLog
from .authz import Principal, authorize
from .crypto_envelope import DataKey, WrappedDataKey, oaep_padding
from .errors import (
    DuplicateSecret,
    KeyDisabled,
    KeyGenerationFailure,
    KeyNotFound,
    SecretNotFound,
    Unauthorized,
    UnwrapFailure,
)

KEK_BITS = 3072
MASTER_KEY_ENV = "LOCKBOX_VAULT_MASTER_KEY"


@dataclass(frozen=True)
class KeyHandle:
    name: str
    version: int
    created_at: float
    enabled: bool


@dataclass
class _KekRecord:
    handle: KeyHandle
    private_material: rsa.RSAPrivateKey  # never leaves this module
    public_pem: str


def master_key_from_env(var: str = MASTER_KEY_ENV) -> bytes:
    raw = os.environ.get(var)
    if not raw:
        raise KeyGenerationFailure(f"{var} is not set")
    key = bytes.fromhex(raw)
    if len(key) != 32:
        raise KeyGenerationFailure(f"{var} must be 32 hex-encoded bytes")
    return key


def _seal(master_key: bytes, plaintext: bytes) -> bytes:
    nonce = os.urandom(12)
    return nonce + AESGCM(master_key).encrypt(nonce, plaintext, None)


def _unseal(master_key: bytes, sealed: bytes) -> bytes:
    return AESGCM(master_key).decrypt(sealed[:12], sealed[12:], None)


class KeyVault:
    """Vault-A: non-exportable RSA key pairs, unwrapKey performed inside."""

    def __init__(
        self,
        data_dir: Path | str,
        master_key: bytes,
        audit: AuditLog,
        clock=None,
    ) -> None:
        self._dir = Path(data_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._master_key = master_key
        self._audit = audit
        self._clock = clock or time.time
        self._lock = threading.RLock()
        self._keys: dict[tuple[str, int], _KekRecord] = {}
        self._load()

    def _load(self) -> None:
        for path in sorted(self._dir.iterdir()):
            if not path.is_file() or ".v" not in path.name:
                continue
            rec = json.loads(path.read_text())
            private = serialization.load_pem_private_key(
                _unseal(self._master_key, bytes.fromhex(rec["sealed_private"])),
                password=None,
            )
            handle = KeyHandle(
                name=rec["name"],
                version=rec["version"],
                created_at=rec["created_at"],
                enabled=rec["enabled"],
            )
            self._keys[(handle.name, handle.version)] = _KekRecord(
                handle=handle, private_material=private, public_pem=rec["public_pem"]
            )

    def _persist(self, rec: _KekRecord) -> None:
        private_pem = rec.private_material.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
        payload = {
            "name": rec.handle.name,
            "version": rec.handle.version,
            "created_at": rec.handle.created_at,
            "enabled": rec.handle.enabled,
            "public_pem": rec.public_pem,
            "sealed_private": _seal(self._master_key, private_pem).hex(),
        }
        path = self._dir / f"{rec.handle.name}.v{rec.handle.version}"
        path.write_text(json.dumps(payload))

    def _deny(self, caller: Principal, op: str, resource: str, correlation_id: Optional[str]) -> None:
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name, op=op, resource=resource, outcome="denied", details=details
        )

    def latest_handle(self, name: str) -> Optional[KeyHandle]:
        with self._lock:
            versions = [v for (n, v) in self._keys if n == name]
            if not versions:
                return None
            return self._keys[(name, max(versions))].handle

    def create_rsa_key(
        self, name: str, caller: Principal, correlation_id: Optional[str] = None
    ) -> KeyHandle:
        if not authorize(caller.name, caller.roles, "createKey", name).allowed:
            self._deny(caller, "createKey", name, correlation_id)
            raise Unauthorized(f"{caller.name} may not create keys")
        with self._lock:
            versions = [v for (n, v) in self._keys if n == name]
            version = max(versions) + 1 if versions else 1
            try:
                private = rsa.generate_private_key(public_exponent=65537, key_size=KEK_BITS)
            except Exception as exc:
                raise KeyGenerationFailure("RSA key generation failed") from exc
            public_pem = (
                private.public_key()
                .public_bytes(
                    serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
                )
                .decode("ascii")
            )
            handle = KeyHandle(
                name=name, version=version, created_at=self._clock(), enabled=True
            )
            rec = _KekRecord(handle=handle, private_material=private, public_pem=public_pem)
            self._persist(rec)
            self._keys[(name, version)] = rec
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name,
            op="createKey",
            resource=f"{name}.v{version}",
            outcome="success",
            details=details,
        )
        return handle

    def get_public_key(self, handle: KeyHandle, caller: Principal) -> str:
        if not authorize(caller.name, caller.roles, "get_public_key", handle.name).allowed:
            raise Unauthorized(f"{caller.name} may not read public keys")
        with self._lock:
            rec = self._keys.get((handle.name, handle.version))
            if rec is None:
                raise KeyNotFound(f"no key {handle.name}.v{handle.version}")
            if not rec.handle.enabled:
                raise KeyDisabled(f"key {handle.name}.v{handle.version} is disabled")
            return rec.public_pem

    def unwrap_key(
        self,
        handle: KeyHandle,
        wrapped: WrappedDataKey,
        caller: Principal,
        correlation_id: Optional[str] = None,
    ) -> DataKey:
        resource = f"{handle.name}.v{handle.version}"
        if not authorize(caller.name, caller.roles, "unwrapKey", resource).allowed:
            self._deny(caller, "unwrapKey", resource, correlation_id)
            raise Unauthorized(f"{caller.name} may not unwrap keys")
        with self._lock:
            rec = self._keys.get((handle.name, handle.version))
            if rec is None:
                raise KeyNotFound(f"no key {resource}")
            if not rec.handle.enabled:
                raise KeyDisabled(f"key {resource} is disabled")
            if wrapped.kek_name != handle.name or wrapped.kek_version != handle.version:
                raise UnwrapFailure("wrapped key does not reference this handle")
            try:
                material = rec.private_material.decrypt(wrapped.bytes, oaep_padding())
            except Exception:
                raise UnwrapFailure("OAEP decryption failed") from None
            if len(material) != crypto_envelope.DATA_KEY_LEN:
                raise UnwrapFailure("unwrapped material has the wrong length")
            key = DataKey(material)
            details = {"correlation_id": correlation_id} if correlation_id else {}
            try:
                # Fail closed: no audit record, no key release.
                self._audit.record(
                    principal=caller.name,
                    op="unwrapKey",
                    resource=resource,
                    outcome="success",
                    details=details,
                )
            except Exception:
                key.wipe()
                raise
            return key

    def disable_key(
        self, handle: KeyHandle, caller: Principal, correlation_id: Optional[str] = None
    ) -> None:
        resource = f"{handle.name}.v{handle.version}"
        if not authorize(caller.name, caller.roles, "disable_key", resource).allowed:
            self._deny(caller, "disable_key", resource, correlation_id)
            raise Unauthorized(f"{caller.name} may not disable keys")
        with self._lock:
            rec = self._keys.get((handle.name, handle.version))
            if rec is None:
                raise KeyNotFound(f"no key {resource}")
            rec.handle = KeyHandle(
                name=rec.handle.name,
                version=rec.handle.version,
                created_at=rec.handle.created_at,
                enabled=False,
            )
            self._persist(rec)
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name,
            op="disable_key",
            resource=resource,
            outcome="success",
            details=details,
        )


class SecretVault:
    """Vault-B: wrapped data keys stored as opaque, sealed records."""

    def __init__(
        self,
        data_dir: Path | str,
        master_key: bytes,
        audit: AuditLog,
        clock=None,
    ) -> None:
        self._dir = Path(data_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._master_key = master_key
        self._audit = audit
        self._clock = clock or time.time
        self._lock = threading.Lock()

    def _path(self, secret_name: str) -> Path:
        return self._dir / f"{secret_name}.v1"

    def _deny(self, caller: Principal, op: str, resource: str, correlation_id: Optional[str]) -> None:
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name, op=op, resource=resource, outcome="denied", details=details
        )

    def put_secret(
        self,
        secret_name: str,
        wrapped: WrappedDataKey,
        caller: Principal,
        correlation_id: Optional[str] = None,
    ) -> None:
        if not authorize(caller.name, caller.roles, "put_secret", secret_name).allowed:
            self._deny(caller, "put_secret", secret_name, correlation_id)
            raise Unauthorized(f"{caller.name} may not store secrets")
        with self._lock:
            path = self._path(secret_name)
            if path.exists():
                raise DuplicateSecret(f"secret {secret_name!r} already exists")
            record = {
                "secret_name": secret_name,
                "kek_name": wrapped.kek_name,
                "kek_version": wrapped.kek_version,
                "created_at": self._clock(),
                "sealed": _seal(self._master_key, wrapped.bytes).hex(),
            }
            path.write_text(json.dumps(record))
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name,
            op="put_secret",
            resource=secret_name,
            outcome="success",
            details=details,
        )

    def get_secret(
        self, secret_name: str, caller: Principal, correlation_id: Optional[str] = None
    ) -> WrappedDataKey:
        if not authorize(caller.name, caller.roles, "get_secret", secret_name).allowed:
            self._deny(caller, "get_secret", secret_name, correlation_id)
            raise Unauthorized(f"{caller.name} may not read secrets")
        with self._lock:
            path = self._path(secret_name)
            if not path.exists():
                raise SecretNotFound(f"no secret {secret_name!r}")
            record = json.loads(path.read_text())
            wrapped = WrappedDataKey(
                bytes=_unseal(self._master_key, bytes.fromhex(record["sealed"])),
                kek_name=record["kek_name"],
                kek_version=record["kek_version"],
            )
        details = {"correlation_id": correlation_id} if correlation_id else {}
        self._audit.record(
            principal=caller.name,
            op="get_secret",
            resource=secret_name,
            outcome="success",
            details=details,
        )
        return wrapped
