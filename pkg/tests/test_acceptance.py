"""Acceptance suite: one test per criterion, each printing a verdict line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
pass/fail lines.
"""

from __future__ import annotations

import base64
import io
import logging
import os
import random
import secrets
import time
from contextlib import contextmanager

import pytest
from fastapi.testclient import TestClient

from conftest import USERS
from gcm_reference import gcm_encrypt
from lockbox import authz
from lockbox import crypto_envelope as ce
from lockbox.errors import (
    AuthenticationFailed,
    DocumentNotFound,
    IntegrityError,
    NotInitiator,
    Unauthorized,
)
from lockbox.server import LockboxService, ServerConfig, create_app
from lockbox.store import DAY
from test_crypto_envelope import KAT_VECTORS
from test_server import make_envelope, upload


@contextmanager
def criterion(number: int, name: str):
    try:
        yield
    except BaseException:
        print(f"\n[criterion {number}] {name}: FAIL")
        raise
    else:
        print(f"\n[criterion {number}] {name}: PASS")


def build_service(tmp_path, registry, clock):
    config = ServerConfig(
        data_root=tmp_path / "data",
        user_registry=registry,
        token_key=secrets.token_bytes(32),
        vault_master_key=secrets.token_bytes(32),
        store_master_key=secrets.token_bytes(32),
    )
    return LockboxService(config, clock=clock)


def test_criterion_1_crypto_conformance(kek_3072):
    with criterion(1, "crypto conformance (KATs + 1000 wrap/unwrap roundtrips)"):
        assert len(KAT_VECTORS) >= 5
        for key_hex, iv_hex, pt_hex, ct_hex, tag_hex in KAT_VECTORS:
            key_bytes = bytes.fromhex(key_hex)
            nonce = bytes.fromhex(iv_hex)
            plaintext = bytes.fromhex(pt_hex)
            expected = bytes.fromhex(ct_hex) + bytes.fromhex(tag_hex)
            assert gcm_encrypt(key_bytes, nonce, plaintext) == expected
            kat_key = ce.DataKey(key_bytes)
            payload = ce.encrypt_document(plaintext, kat_key, nonce)
            kat_key.wipe()
            assert payload.ciphertext_and_tag == expected  # bit-exact

        public = kek_3072.public_key()
        for _ in range(1000):
            key = ce.DataKey(os.urandom(32))
            wrapped = ce.wrap_data_key(key, public, "app-kek", 1)
            assert kek_3072.decrypt(wrapped.bytes, ce.oaep_padding()) == key.reveal()
            key.wipe()


def test_criterion_2_tamper_rejection():
    with criterion(2, "exhaustive single-bit-flip tamper rejection"):
        key = ce.DataKey(os.urandom(32))
        payload = ce.encrypt_document(os.urandom(36), key, os.urandom(12))
        unit = payload.nonce + payload.ciphertext_and_tag
        assert len(unit) == 64
        live_before = ce.instrumentation.live_plaintext_buffers
        rejected = 0
        for byte_index in range(64):
            for bit in range(8):
                mutated = bytearray(unit)
                mutated[byte_index] ^= 1 << bit
                tampered = ce.EncryptedPayload(
                    nonce=bytes(mutated[:12]), ciphertext_and_tag=bytes(mutated[12:])
                )
                with pytest.raises(AuthenticationFailed):
                    ce.decrypt_document(tampered, key)
                rejected += 1
        assert rejected == 512  # 100% rejection
        # No plaintext observable on any error path.
        assert ce.instrumentation.live_plaintext_buffers == live_before
        key.wipe()


def test_criterion_3_cryptographic_gate(tmp_path, registry, manual_clock):
    with criterion(3, "cryptographic gate over 50 randomized workflows"):
        service = build_service(tmp_path, registry, manual_clock)
        tokens = {u: service.login(u, USERS[u][0]) for u in USERS}
        rng = random.Random(0xC0FFEE)
        completed = 0
        documents: list[str] = []
        analyses: list[str] = []

        def scenario_upload_and_analyze():
            nonlocal completed
            doc = upload(service, tokens["red-alice"], os.urandom(rng.randrange(1, 2048)))
            documents.append(doc)
            outcome = service.initiate_analysis(tokens["blue-carol"], doc)
            assert outcome["status"] == "complete"
            analyses.append(outcome["analysis_id"])
            completed += 1

        def scenario_denied_analysis():
            doc = upload(service, tokens["red-bob"], b"x" * 64)
            documents.append(doc)
            with pytest.raises(Unauthorized):
                service.initiate_analysis(tokens["red-bob"], doc)

        def scenario_denied_upload():
            with pytest.raises(Unauthorized):
                service.begin_upload(tokens["blue-dave"])

        def scenario_tampered_document():
            doc = upload(service, tokens["red-alice"], os.urandom(512))
            documents.append(doc)
            path = service.config.data_root / "store" / "documents" / f"{doc}.blob"
            raw = bytearray(path.read_bytes())
            raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
            path.write_bytes(bytes(raw))
            with pytest.raises(IntegrityError):
                service.initiate_analysis(tokens["blue-carol"], doc)

        def scenario_missing_document():
            with pytest.raises(DocumentNotFound):
                service.initiate_analysis(tokens["blue-carol"], f"doc-ghost-{rng.random()}")

        def scenario_non_initiator_fetch():
            if not analyses:
                return
            with pytest.raises(NotInitiator):
                service.get_result(tokens["blue-dave"], rng.choice(analyses))

        scenarios = [
            scenario_upload_and_analyze,
            scenario_denied_analysis,
            scenario_denied_upload,
            scenario_tampered_document,
            scenario_missing_document,
            scenario_non_initiator_fetch,
        ]
        for _ in range(50):
            rng.choice(scenarios)()

        unwrap_successes = service.audit.query(op="unwrapKey", outcome="success")
        assert len(unwrap_successes) == completed
        # unwrapKey events come from unwrap operations only, and each joins
        # one successful analysis by correlation id.
        analysis_cids = {
            e.details["correlation_id"]
            for e in service.audit.query(op="initiate_analysis", outcome="success")
        }
        assert {e.details["correlation_id"] for e in unwrap_successes} == analysis_cids


def test_criterion_4_plaintext_confinement(tmp_path, registry, manual_clock):
    with criterion(4, "plaintext confinement (sentinel scan + boundary counts)"):
        sentinel = os.urandom(64)
        log_capture = io.StringIO()
        handler = logging.StreamHandler(log_capture)
        logging.getLogger().addHandler(handler)
        try:
            service = build_service(tmp_path, registry, manual_clock)
            app = create_app(service)
            with TestClient(app) as client:
                red = client.post(
                    "/auth/login",
                    json={"username": "red-alice", "password": USERS["red-alice"][0]},
                ).json()["token"]
                blue = client.post(
                    "/auth/login",
                    json={"username": "blue-carol", "password": USERS["blue-carol"][0]},
                ).json()["token"]
                begin = client.post(
                    "/uploads/begin", headers={"Authorization": f"Bearer {red}"}
                ).json()
                envelope = make_envelope(begin, b"T1021 " + sentinel + b" trailer")
                doc = client.post(
                    f"/uploads/{begin['session_id']}/complete",
                    headers={"Authorization": f"Bearer {red}"},
                    content=envelope,
                ).json()["document_id"]
                analysis = client.post(
                    f"/documents/{doc}/analyze", headers={"Authorization": f"Bearer {blue}"}
                ).json()
                assert analysis["status"] == "complete"
                result = client.get(
                    f"/analyses/{analysis['analysis_id']}",
                    headers={"Authorization": f"Bearer {blue}"},
                )
                assert result.status_code == 200
            assert app.state.boundary_violations == []
            assert ce.instrumentation.live_plaintext_buffers == 0
        finally:
            logging.getLogger().removeHandler(handler)

        needles = [sentinel, sentinel.hex().encode(), base64.b64encode(sentinel)]
        for path in service.config.data_root.rglob("*"):
            if path.is_file():
                blob = path.read_bytes()
                for needle in needles:
                    assert needle not in blob, f"sentinel found in {path}"
        log_text = log_capture.getvalue().encode()
        for needle in needles:
            assert needle not in log_text


def test_criterion_5_rbac_matrix():
    with criterion(5, "RBAC matrix 30/30 (5 roles x 6 actions)"):
        actions = [
            "upload",
            "list_own_documents",
            "list_documents",
            "initiate_analysis",
            "get_result",
            "query_audit",
        ]
        expected = {
            authz.Role.RedTeam: {"upload", "list_own_documents"},
            authz.Role.BlueTeam: {"list_documents", "initiate_analysis", "get_result"},
            authz.Role.ServiceBackend: set(),
            authz.Role.Auditor: {"query_audit"},
            None: set(),
        }
        checked = 0
        for role, allowed in expected.items():
            roles = frozenset() if role is None else frozenset({role})
            for action in actions:
                decision = authz.authorize("probe", roles, action)
                assert decision.allowed == (action in allowed), (role, action)
                checked += 1
        assert checked == 30


def test_criterion_6_retention(tmp_path, registry, manual_clock):
    with criterion(6, "retention lifecycle (7-day documents, 90-day results)"):
        service = build_service(tmp_path, registry, manual_clock)
        red = service.login("red-alice", USERS["red-alice"][0])
        blue = service.login("blue-carol", USERS["blue-carol"][0])
        doc = upload(service, red, b"T1078 valid accounts")
        outcome = service.initiate_analysis(blue, doc)
        start = manual_clock.now()

        assert service.retention_sweep(None, now=start + 6 * DAY) == []
        assert service.retention_sweep(None, now=start + 8 * DAY) == [doc]
        assert service.retention_sweep(None, now=start + 89 * DAY) == []
        assert service.retention_sweep(None, now=start + 91 * DAY) == [outcome["analysis_id"]]
        # Idempotence at a fixed timestamp.
        assert service.retention_sweep(None, now=start + 91 * DAY) == []


def test_criterion_7_initiator_only_results(tmp_path, registry, manual_clock):
    with criterion(7, "initiator-only result access, both attempts audited"):
        service = build_service(tmp_path, registry, manual_clock)
        red = service.login("red-alice", USERS["red-alice"][0])
        carol = service.login("blue-carol", USERS["blue-carol"][0])
        dave = service.login("blue-dave", USERS["blue-dave"][0])
        doc = upload(service, red, b"T1110.003 password spraying")
        outcome = service.initiate_analysis(carol, doc)

        result = service.get_result(carol, outcome["analysis_id"])
        assert result["document_id"] == doc
        with pytest.raises(NotInitiator):
            service.get_result(dave, outcome["analysis_id"])
        fetches = [(e.principal, e.outcome) for e in service.audit.query(op="get_result")]
        assert ("blue-carol", "success") in fetches
        assert ("blue-dave", "denied") in fetches


def test_criterion_8_non_exportability(tmp_path, registry, manual_clock):
    with criterion(8, "non-exportability of the KEK private key"):
        service = build_service(tmp_path, registry, manual_clock)
        record = service.vault_a._keys[(service.app_kek.name, service.app_kek.version)]
        d = record.private_material.private_numbers().d
        d_bytes = d.to_bytes((d.bit_length() + 7) // 8, "big")
        needles = [d_bytes, d_bytes.hex().encode(), base64.b64encode(d_bytes)]

        responses: list[bytes] = []
        app = create_app(service)
        with TestClient(app) as client:
            red = client.post(
                "/auth/login", json={"username": "red-alice", "password": USERS["red-alice"][0]}
            )
            responses.append(red.content)
            token = red.json()["token"]
            blue_login = client.post(
                "/auth/login", json={"username": "blue-carol", "password": USERS["blue-carol"][0]}
            )
            responses.append(blue_login.content)
            blue = blue_login.json()["token"]
            auditor_login = client.post(
                "/auth/login", json={"username": "aud-erin", "password": USERS["aud-erin"][0]}
            )
            auditor = auditor_login.json()["token"]

            begin = client.post("/uploads/begin", headers={"Authorization": f"Bearer {token}"})
            responses.append(begin.content)
            complete = client.post(
                f"/uploads/{begin.json()['session_id']}/complete",
                headers={"Authorization": f"Bearer {token}"},
                content=make_envelope(begin.json(), b"T1486 impact"),
            )
            responses.append(complete.content)
            doc = complete.json()["document_id"]
            analysis = client.post(
                f"/documents/{doc}/analyze", headers={"Authorization": f"Bearer {blue}"}
            )
            responses.append(analysis.content)
            result = client.get(
                f"/analyses/{analysis.json()['analysis_id']}",
                headers={"Authorization": f"Bearer {blue}"},
            )
            responses.append(result.content)
            audit_dump = client.get("/audit", headers={"Authorization": f"Bearer {auditor}"})
            responses.append(audit_dump.content)

        haystacks = responses + [
            p.read_bytes() for p in service.config.data_root.rglob("*") if p.is_file()
        ]
        for haystack in haystacks:
            for needle in needles:
                assert needle not in haystack


def test_criterion_9_end_to_end_desk_run(tmp_path, registry, manual_clock):
    with criterion(9, "100 KiB end-to-end upload/analyze/fetch under 5 s"):
        service = build_service(tmp_path, registry, manual_clock)
        document = os.urandom(50 * 1024) + b" T1041 exfiltration " + os.urandom(50 * 1024)
        app = create_app(service)
        with TestClient(app) as client:
            red = client.post(
                "/auth/login", json={"username": "red-alice", "password": USERS["red-alice"][0]}
            ).json()["token"]
            blue = client.post(
                "/auth/login", json={"username": "blue-carol", "password": USERS["blue-carol"][0]}
            ).json()["token"]

            started = time.perf_counter()
            begin = client.post(
                "/uploads/begin", headers={"Authorization": f"Bearer {red}"}
            ).json()
            doc = client.post(
                f"/uploads/{begin['session_id']}/complete",
                headers={"Authorization": f"Bearer {red}"},
                content=make_envelope(begin, document),
            ).json()["document_id"]
            analysis = client.post(
                f"/documents/{doc}/analyze", headers={"Authorization": f"Bearer {blue}"}
            ).json()
            result = client.get(
                f"/analyses/{analysis['analysis_id']}",
                headers={"Authorization": f"Bearer {blue}"},
            ).json()
            elapsed = time.perf_counter() - started

        assert analysis["status"] == "complete"
        assert any(f["technique_id"] == "T1041" for f in result["findings"])
        assert elapsed < 5.0, f"end-to-end run took {elapsed:.2f}s"
