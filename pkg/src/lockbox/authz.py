"""Emulated identity provider and role-based policy engine.

Issues MAC-signed access tokens against a static user registry and
answers deny-by-default authorization queries for every action in the
system. Passwords live in the registry only as salted PBKDF2 hashes.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import secrets
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .errors import InvalidCredentials, TokenExpired, TokenInvalid

TOKEN_LIFETIME_SECONDS = 60 * 60
PBKDF2_ITERATIONS = 50_000
MAC_LEN = 32


class Role(str, Enum):
    RedTeam = "RedTeam"
    BlueTeam = "BlueTeam"
    ServiceBackend = "ServiceBackend"
    Auditor = "Auditor"


@dataclass(frozen=True)
class Principal:
    name: str
    roles: frozenset[Role]


@dataclass(frozen=True)
class PolicyDecision:
    allowed: bool
    reason: str


# Complete authority mapping; anything absent is denied. User-facing
# actions mirror the workflow surface; backend actions are held only by
# the server's own service principal.
RBAC_MATRIX: dict[Role, frozenset[str]] = {
    Role.RedTeam: frozenset({"upload", "list_own_documents"}),
    Role.BlueTeam: frozenset({"list_documents", "initiate_analysis", "get_result"}),
    Role.ServiceBackend: frozenset(
        {
            "createKey",
            "unwrapKey",
            "put_secret",
            "get_secret",
            "put_blob",
            "get_blob",
            "get_public_key",
            "disable_key",
            "retention_sweep",
        }
    ),
    Role.Auditor: frozenset({"query_audit", "retention_sweep"}),
}


def authorize(
    principal: str,
    roles: Iterable[Role],
    action: str,
    resource: str = "",
) -> PolicyDecision:
    """Deny-by-default RBAC check. Total: never raises."""
    for role in roles:
        if action in RBAC_MATRIX.get(role, frozenset()):
            return PolicyDecision(allowed=True, reason=f"role {role.value} grants {action}")
    return PolicyDecision(allowed=False, reason=f"no role of {principal} grants {action}")


@dataclass(frozen=True)
class AccessToken:
    principal: str
    roles: frozenset[Role]
    issued_at: float
    expires_at: float

    def body(self) -> bytes:
        return json.dumps(
            {
                "principal": self.principal,
                "roles": sorted(r.value for r in self.roles),
                "issued_at": self.issued_at,
                "expires_at": self.expires_at,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")


def hash_password(password: str, salt: bytes, iterations: int = PBKDF2_ITERATIONS) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)


def write_registry(path: Path | str, users: Mapping[str, tuple[str, list[str]]]) -> None:
    """Write a user registry file from {username: (password, roles)}."""
    records = []
    for username, (password, roles) in users.items():
        salt = secrets.token_bytes(16)
        records.append(
            {
                "username": username,
                "password_hash": hash_password(password, salt).hex(),
                "salt": salt.hex(),
                "roles": list(roles),
            }
        )
    Path(path).write_text(json.dumps(records, indent=2))


class IdentityProvider:
    """Local stand-in for the cloud identity provider.

    Authenticates against the registry and issues opaque tokens:
    base64(canonical JSON body || HMAC-SHA256 over the body).
    """

    def __init__(
        self,
        registry_path: Path | str,
        token_key: bytes,
        audit=None,
        lifetime: float = TOKEN_LIFETIME_SECONDS,
    ) -> None:
        if len(token_key) != 32:
            raise ValueError("token key must be 32 bytes")
        self._token_key = token_key
        self._lifetime = lifetime
        self._audit = audit
        self._users: dict[str, dict] = {}
        for rec in json.loads(Path(registry_path).read_text()):
            self._users[rec["username"]] = rec

    def authenticate(self, username: str, password: str, now: Optional[float] = None) -> str:
        now = time.time() if now is None else now
        rec = self._users.get(username)
        ok = False
        if rec is not None:
            expected = bytes.fromhex(rec["password_hash"])
            candidate = hash_password(password, bytes.fromhex(rec["salt"]))
            ok = hmac.compare_digest(expected, candidate)
        if not ok:
            if self._audit is not None:
                self._audit.record(
                    principal=username, op="login", resource="", outcome="denied"
                )
            # Unknown user and wrong password are intentionally indistinguishable.
            raise InvalidCredentials("invalid username or password")
        token = AccessToken(
            principal=username,
            roles=frozenset(Role(r) for r in rec["roles"]),
            issued_at=now,
            expires_at=now + self._lifetime,
        )
        if self._audit is not None:
            self._audit.record(principal=username, op="login", resource="", outcome="success")
        return self.sign(token)

    def sign(self, token: AccessToken) -> str:
        body = token.body()
        mac = hmac.new(self._token_key, body, hashlib.sha256).digest()
        return base64.urlsafe_b64encode(body + mac).decode("ascii")

    def validate_token(self, token_str: str, now: Optional[float] = None) -> Principal:
        now = time.time() if now is None else now
        try:
            raw = base64.urlsafe_b64decode(token_str.encode("ascii"))
        except Exception:
            raise TokenInvalid("token is not valid base64") from None
        if len(raw) <= MAC_LEN:
            raise TokenInvalid("token too short")
        body, mac = raw[:-MAC_LEN], raw[-MAC_LEN:]
        expected = hmac.new(self._token_key, body, hashlib.sha256).digest()
        if not hmac.compare_digest(mac, expected):
            raise TokenInvalid("token signature does not verify")
        try:
            parsed = json.loads(body.decode("utf-8"))
            principal = parsed["principal"]
            roles = frozenset(Role(r) for r in parsed["roles"])
            expires_at = float(parsed["expires_at"])
        except Exception:
            raise TokenInvalid("token body is malformed") from None
        if now >= expires_at:
            raise TokenExpired("token has expired")
        return Principal(name=principal, roles=roles)
