from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from conftest import USERS
from lockbox.server import create_app
from lockbox.store import DAY
from test_server import make_envelope


@pytest.fixture()
def client(service):
    app = create_app(service)
    with TestClient(app, raise_server_exceptions=False) as client:
        client.app = app
        yield client


def login(client, user):
    response = client.post(
        "/auth/login", json={"username": user, "password": USERS[user][0]}
    )
    assert response.status_code == 200
    return response.json()["token"]


def auth(token):
    return {"Authorization": f"Bearer {token}"}


def http_upload(client, token, plaintext=b"contents with T1110"):
    begin = client.post("/uploads/begin", headers=auth(token)).json()
    response = client.post(
        f"/uploads/{begin['session_id']}/complete",
        headers={**auth(token), "Content-Type": "application/octet-stream"},
        content=make_envelope(begin, plaintext),
    )
    assert response.status_code == 200
    return response.json()["document_id"]


def test_login_and_bad_credentials(client):
    assert login(client, "red-alice")
    response = client.post("/auth/login", json={"username": "red-alice", "password": "wrong"})
    assert response.status_code == 401
    assert response.json()["error"] == "invalid_credentials"


def test_missing_bearer_token(client):
    assert client.post("/uploads/begin").status_code == 403
    assert client.get("/documents").status_code == 403


def test_full_workflow_over_http(client):
    red = login(client, "red-alice")
    blue = login(client, "blue-carol")

    document_id = http_upload(client, red, b"report uses T1566.001 then T1059")
    docs = client.get("/documents", headers=auth(blue)).json()
    assert [d["document_id"] for d in docs] == [document_id]

    analysis = client.post(f"/documents/{document_id}/analyze", headers=auth(blue)).json()
    assert analysis["status"] == "complete"

    result = client.get(f"/analyses/{analysis['analysis_id']}", headers=auth(blue)).json()
    assert [f["technique_id"] for f in result["findings"]] == ["T1566.001", "T1059"]
    assert client.app.state.boundary_violations == []


def test_role_errors_map_to_statuses(client):
    red = login(client, "red-alice")
    blue = login(client, "blue-carol")
    dave = login(client, "blue-dave")

    assert client.post("/uploads/begin", headers=auth(blue)).status_code == 403

    document_id = http_upload(client, red)
    assert (
        client.post(f"/documents/{document_id}/analyze", headers=auth(red)).status_code == 403
    )
    analysis = client.post(f"/documents/{document_id}/analyze", headers=auth(blue)).json()
    response = client.get(f"/analyses/{analysis['analysis_id']}", headers=auth(dave))
    assert response.status_code == 403
    assert response.json()["error"] == "not_initiator"


def test_not_found_statuses(client):
    blue = login(client, "blue-carol")
    assert client.post("/documents/doc-x/analyze", headers=auth(blue)).status_code == 404
    assert client.get("/analyses/an-x", headers=auth(blue)).status_code == 404


def test_malformed_envelope_is_400(client):
    red = login(client, "red-alice")
    begin = client.post("/uploads/begin", headers=auth(red)).json()
    response = client.post(
        f"/uploads/{begin['session_id']}/complete",
        headers={**auth(red), "Content-Type": "application/octet-stream"},
        content=b"garbage",
    )
    assert response.status_code == 400
    assert response.json()["error"] == "malformed_envelope"


def test_session_reuse_is_409(client):
    red = login(client, "red-alice")
    begin = client.post("/uploads/begin", headers=auth(red)).json()
    for expected in (200, 409):
        response = client.post(
            f"/uploads/{begin['session_id']}/complete",
            headers={**auth(red), "Content-Type": "application/octet-stream"},
            content=make_envelope(begin, b"x"),
        )
        assert response.status_code == expected


def test_audit_endpoint_filters_and_roles(client):
    red = login(client, "red-alice")
    auditor = login(client, "aud-erin")
    http_upload(client, red)

    assert client.get("/audit", headers=auth(red)).status_code == 403
    events = client.get("/audit", headers=auth(auditor)).json()
    assert any(e["op"] == "upload" for e in events)
    uploads = client.get(
        "/audit", params={"op": "upload", "principal": "red-alice"}, headers=auth(auditor)
    ).json()
    assert uploads and all(e["op"] == "upload" for e in uploads)


def test_sweep_endpoint(client, service, manual_clock):
    red = login(client, "red-alice")
    auditor = login(client, "aud-erin")
    document_id = http_upload(client, red)

    assert client.post("/admin/retention/sweep", headers=auth(red)).status_code == 403
    now = manual_clock.now() + 8 * DAY
    response = client.post("/admin/retention/sweep", json={"now": now}, headers=auth(auditor))
    assert response.json() == {"purged": [document_id]}
