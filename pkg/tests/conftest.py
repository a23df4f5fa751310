from __future__ import annotations

import os
import secrets
import sys
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric import rsa

sys.path.insert(0, str(Path(__file__).parent))

from lockbox import authz
from lockbox import crypto_envelope as ce
from lockbox.audit import AuditLog
from lockbox.server import LockboxService, ServerConfig
from lockbox.store import ManualClock

USERS = {
    "red-alice": ("red-pass-1", ["RedTeam"]),
    "red-bob": ("red-pass-2", ["RedTeam"]),
    "blue-carol": ("blue-pass-1", ["BlueTeam"]),
    "blue-dave": ("blue-pass-2", ["BlueTeam"]),
    "aud-erin": ("audit-pass", ["Auditor"]),
}


@pytest.fixture(autouse=True)
def _fresh_instrumentation():
    # Live-counter assertions must only see the current test's activity, not
    # unwiped fixtures left behind by earlier tests.
    ce.instrumentation.reset()
    yield


@pytest.fixture(scope="session")
def kek_3072():
    return rsa.generate_private_key(public_exponent=65537, key_size=3072)


@pytest.fixture(scope="session")
def kek_2048():
    return rsa.generate_private_key(public_exponent=65537, key_size=2048)


@pytest.fixture()
def audit_log(tmp_path):
    return AuditLog(tmp_path / "audit.log")


@pytest.fixture()
def registry(tmp_path):
    path = tmp_path / "users.json"
    authz.write_registry(path, USERS)
    return path


@pytest.fixture()
def manual_clock():
    return ManualClock(start=1_700_000_000.0)


@pytest.fixture()
def service(tmp_path, registry, manual_clock):
    config = ServerConfig(
        data_root=tmp_path / "data",
        user_registry=registry,
        token_key=secrets.token_bytes(32),
        vault_master_key=secrets.token_bytes(32),
        store_master_key=secrets.token_bytes(32),
    )
    return LockboxService(config, clock=manual_clock)


@pytest.fixture()
def tokens(service):
    return {user: service.login(user, USERS[user][0]) for user in USERS}
