"""Command-line client.

Plays the browser's part: authenticates, performs all document
cryptography locally, and sends only ciphertext over the wire. The data
key is generated, used, and wiped within a single invocation.
"""

from __future__ import annotations

import json
import os
import sys
import uuid
from pathlib import Path
from typing import Any, Optional

import click
import httpx

from .crypto_envelope import (
    ENVELOPE_VERSION,
    Envelope,
    encode_envelope,
    encrypt_document,
    generate_data_key,
    generate_nonce,
    load_public_key_pem,
    wrap_data_key,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_AUTH = 3
EXIT_AUTHZ = 4
EXIT_NOT_FOUND = 5
EXIT_INTEGRITY = 6
EXIT_SERVER = 7

_EXIT_BY_ERROR = {
    "invalid_credentials": EXIT_AUTH,
    "token_invalid": EXIT_AUTH,
    "token_expired": EXIT_AUTH,
    "unauthorized": EXIT_AUTHZ,
    "not_initiator": EXIT_AUTHZ,
    "session_expired": EXIT_NOT_FOUND,
    "document_not_found": EXIT_NOT_FOUND,
    "result_not_found": EXIT_NOT_FOUND,
    "blob_not_found": EXIT_NOT_FOUND,
    "integrity_error": EXIT_INTEGRITY,
    "authentication_failed": EXIT_INTEGRITY,
    "malformed_envelope": EXIT_USAGE,
    "kek_mismatch": EXIT_INTEGRITY,
}


def _session_path() -> Path:
    home = os.environ.get("LOCKBOX_HOME")
    base = Path(home) if home else Path.home() / ".config" / "lockbox"
    return base / "session.json"


def _load_session() -> dict:
    path = _session_path()
    if not path.exists():
        click.echo("no session; run `lockbox login <user>` first", err=True)
        sys.exit(EXIT_AUTH)
    return json.loads(path.read_text())


def _save_session(server: str, token: str) -> None:
    path = _session_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"server": server, "token": token}))
    os.chmod(path, 0o600)


def _fail(response: httpx.Response) -> None:
    try:
        body = response.json()
        code = body.get("error", "")
        message = body.get("message", response.text)
    except Exception:
        code, message = "", response.text
    click.echo(f"error: {message or code or response.status_code}", err=True)
    sys.exit(_EXIT_BY_ERROR.get(code, EXIT_SERVER))


def _request(
    ctx_server: str,
    method: str,
    path: str,
    token: Optional[str] = None,
    **kwargs: Any,
) -> httpx.Response:
    headers = kwargs.pop("headers", {})
    if token:
        headers["Authorization"] = f"Bearer {token}"
    try:
        response = httpx.request(
            method, ctx_server.rstrip("/") + path, headers=headers, timeout=30.0, **kwargs
        )
    except httpx.HTTPError as exc:
        click.echo(f"error: cannot reach server: {exc}", err=True)
        sys.exit(EXIT_SERVER)
    if response.status_code >= 400:
        _fail(response)
    return response


def _emit(ctx: click.Context, payload: Any, human: str) -> None:
    if ctx.obj["json"]:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
    else:
        click.echo(human)


@click.group()
@click.option("--server", envvar="LOCKBOX_SERVER", default=None, help="server base URL")
@click.option("--json", "as_json", is_flag=True, help="machine-readable output")
@click.option("--config", type=click.Path(), default=None, help="client config file (JSON)")
@click.pass_context
def main(ctx: click.Context, server: Optional[str], as_json: bool, config: Optional[str]) -> None:
    if server is None and config:
        server = json.loads(Path(config).read_text()).get("server")
    ctx.obj = {"server": server, "json": as_json}


def _server_url(ctx: click.Context) -> str:
    if ctx.obj["server"]:
        return ctx.obj["server"]
    session = _session_path()
    if session.exists():
        return json.loads(session.read_text())["server"]
    click.echo("no server configured; pass --server", err=True)
    sys.exit(EXIT_USAGE)


@main.command()
@click.argument("username")
@click.pass_context
def login(ctx: click.Context, username: str) -> None:
    """Authenticate and cache the access token locally."""
    server = _server_url(ctx)
    password = os.environ.get("LOCKBOX_PASSWORD")
    if password is None:
        password = click.prompt("password", hide_input=True)
    response = _request(
        server, "POST", "/auth/login", json={"username": username, "password": password}
    )
    _save_session(server, response.json()["token"])
    _emit(ctx, {"logged_in": username}, f"logged in as {username}")


@main.command()
@click.argument("file", type=click.Path(path_type=Path))
@click.pass_context
def upload(ctx: click.Context, file: Path) -> None:
    """Encrypt FILE locally and upload only the ciphertext envelope."""
    if not file.is_file():
        click.echo(f"error: no such file: {file}", err=True)
        sys.exit(EXIT_USAGE)
    plaintext = file.read_bytes()
    session = _load_session()
    server = ctx.obj["server"] or session["server"]

    begin = _request(server, "POST", "/uploads/begin", token=session["token"]).json()
    public_key = load_public_key_pem(begin["public_key_pem"])

    key = generate_data_key()
    try:
        nonce = generate_nonce()
        payload = encrypt_document(plaintext, key, nonce)
        wrapped = wrap_data_key(key, public_key, begin["kek_name"], int(begin["kek_version"]))
    finally:
        key.wipe()
    envelope = Envelope(
        version=ENVELOPE_VERSION,
        document_id="doc-" + uuid.uuid4().hex,
        wrapped_key=wrapped,
        payload=payload,
    )
    response = _request(
        server,
        "POST",
        f"/uploads/{begin['session_id']}/complete",
        token=session["token"],
        content=encode_envelope(envelope),
        headers={"Content-Type": "application/octet-stream"},
    )
    document_id = response.json()["document_id"]
    _emit(ctx, {"document_id": document_id}, document_id)


@main.command("list")
@click.pass_context
def list_documents(ctx: click.Context) -> None:
    """List documents visible to the current role."""
    session = _load_session()
    server = ctx.obj["server"] or session["server"]
    docs = _request(server, "GET", "/documents", token=session["token"]).json()
    if ctx.obj["json"]:
        click.echo(json.dumps(docs, indent=2, sort_keys=True))
        return
    if not docs:
        click.echo("no documents")
        return
    for d in docs:
        click.echo(f"{d['document_id']}  uploader={d['uploader']}  status={d['status']}")


@main.command()
@click.argument("document_id")
@click.pass_context
def analyze(ctx: click.Context, document_id: str) -> None:
    """Initiate server-side analysis of a stored document."""
    session = _load_session()
    server = ctx.obj["server"] or session["server"]
    result = _request(
        server, "POST", f"/documents/{document_id}/analyze", token=session["token"]
    ).json()
    _emit(ctx, result, f"{result['analysis_id']}  status={result['status']}")


@main.command()
@click.argument("analysis_id")
@click.pass_context
def results(ctx: click.Context, analysis_id: str) -> None:
    """Fetch the analysis result (initiator only)."""
    session = _load_session()
    server = ctx.obj["server"] or session["server"]
    result = _request(server, "GET", f"/analyses/{analysis_id}", token=session["token"]).json()
    if ctx.obj["json"]:
        click.echo(json.dumps(result, indent=2, sort_keys=True))
        return
    stats = result["stats"]
    click.echo(f"document: {result['document_id']}")
    click.echo(
        f"bytes={stats['byte_count']} lines={stats['line_count']} "
        f"techniques={stats['distinct_techniques']}"
    )
    for f in result["findings"]:
        click.echo(f"  {f['technique_id']} @ {f['evidence_offset']}")


@main.command()
@click.option("--op", default=None)
@click.option("--principal", default=None)
@click.option("--outcome", default=None)
@click.option("--from", "since", default=None, type=float)
@click.option("--to", "until", default=None, type=float)
@click.pass_context
def audit(ctx, op, principal, outcome, since, until) -> None:
    """Query the audit log (Auditor role)."""
    session = _load_session()
    server = ctx.obj["server"] or session["server"]
    params = {}
    if op:
        params["op"] = op
    if principal:
        params["principal"] = principal
    if outcome:
        params["outcome"] = outcome
    if since is not None:
        params["from"] = since
    if until is not None:
        params["to"] = until
    events = _request(server, "GET", "/audit", token=session["token"], params=params).json()
    if ctx.obj["json"]:
        click.echo(json.dumps(events, indent=2, sort_keys=True))
        return
    for e in events:
        click.echo(f"{e['seq']:6d}  {e['op']:18s} {e['outcome']:8s} {e['principal']} {e['resource']}")


@main.command()
@click.option("--now", default=None, type=float, help="sweep as-of this timestamp")
@click.pass_context
def sweep(ctx: click.Context, now: Optional[float]) -> None:
    """Run a retention sweep (Auditor/ServiceBackend role)."""
    session = _load_session()
    server = ctx.obj["server"] or session["server"]
    body = {"now": now} if now is not None else {}
    purged = _request(
        server, "POST", "/admin/retention/sweep", token=session["token"], json=body
    ).json()["purged"]
    _emit(ctx, {"purged": purged}, f"purged {len(purged)} blob(s)")


if __name__ == "__main__":
    main()
