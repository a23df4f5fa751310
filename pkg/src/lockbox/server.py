"""Orchestration layer and HTTP service.

Enforces the full sequence for uploads and analyses: authorize, fetch
the encrypted document, release the data key through the vault's
audited unwrapKey, decrypt and analyze strictly in memory, then scrub.
This module is the only place plaintext ever exists server-side, and
every exit path wipes it.
"""

from __future__ import annotations

import argparse
import json
import threading
import uuid

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import crypto_envelope
from .analyzer import Analyzer, TechniqueExtractor
from .audit import AuditLog
from .authz import IdentityProvider, Principal, Role, authorize
from .crypto_envelope import (
    EncryptedPayload,
    NONCE_LEN,
    decode_envelope,
    instrumentation,
)
from .errors import (
    AnalysisFailed,
    AnalysisInProgress,
    AuthenticationFailed,
    BlobNotFound,
    DocumentNotFound,
    DuplicateDocument,
    IntegrityError,
    KekMismatch,
    LockboxError,
    NotInitiator,
    ResultNotFound,
    SecretNotFound,
    SessionConsumed,
    SessionExpired,
    Unauthorized,
)
from .store import DAY, ObjectStore, RetentionPolicy, StoreClock, store_key_from_env
from .vault import KeyHandle, KeyVault, SecretVault, master_key_from_env

SESSION_LIFETIME_SECONDS = 10 * 60
APP_KEK_NAME = "app-kek"
TOKEN_KEY_ENV = "LOCKBOX_TOKEN_KEY"


@dataclass
class ServerConfig:
    data_root: Path
    user_registry: Path
    kek_mode: str = "single"  # "single" | "per-document"
    document_ttl_days: float = 7.0
    result_ttl_days: float = 90.0
    listen_addr: str = "127.0.0.1:8777"
    token_key: Optional[bytes] = None
    vault_master_key: Optional[bytes] = None
    store_master_key: Optional[bytes] = None

    def __post_init__(self) -> None:
        if self.kek_mode not in ("single", "per-document"):
            raise ValueError(f"unknown kek_mode {self.kek_mode!r}")
        self.data_root = Path(self.data_root)
        self.user_registry = Path(self.user_registry)

    @classmethod
    def from_file(cls, path: Path | str) -> "ServerConfig":
        raw = json.loads(Path(path).read_text())
        retention = raw.get("retention", {})
        return cls(
            data_root=Path(raw["data_root"]),
            user_registry=Path(raw["user_registry"]),
            kek_mode=raw.get("kek_mode", "single"),
            document_ttl_days=retention.get("document_days", 7.0),
            result_ttl_days=retention.get("result_days", 90.0),
            listen_addr=raw.get("listen_addr", "127.0.0.1:8777"),
        )


@dataclass
class UploadSession:
    session_id: str
    kek_handle: KeyHandle
    public_pem: str
    created_at: float
    expires_at: float
    uploader: str
    consumed: bool = False


@dataclass
class DocumentMeta:
    document_id: str
    uploader: str
    created_at: float
    kek_name: str
    kek_version: int
    nonce_hex: str  # mirrored from the envelope for fidelity
    status: str = "stored"  # stored | purged

    def public_dict(self) -> dict:
        return {
            "document_id": self.document_id,
            "uploader": self.uploader,
            "created_at": self.created_at,
            "status": self.status,
        }


@dataclass
class AnalysisRecord:
    analysis_id: str
    document_id: str
    initiator: str
    started_at: float
    status: str  # complete | failed
    result_blob_id: str = ""


class LockboxService:
    """In-process core; the HTTP app and tests drive this directly."""

    def __init__(
        self,
        config: ServerConfig,
        clock: Optional[StoreClock] = None,
        analyzer: Optional[Analyzer] = None,
    ) -> None:
        self.config = config
        self.clock = clock or StoreClock()
        config.data_root.mkdir(parents=True, exist_ok=True)

        token_key = config.token_key or bytes.fromhex(_require_env(TOKEN_KEY_ENV))
        vault_key = config.vault_master_key or master_key_from_env()
        store_key = config.store_master_key or store_key_from_env()

        self.audit = AuditLog(config.data_root / "audit.log", clock=self.clock.now)
        self.idp = IdentityProvider(config.user_registry, token_key, audit=self.audit)
        self.backend = Principal("lockbox-backend", frozenset({Role.ServiceBackend}))
        self.vault_a = KeyVault(
            config.data_root / "vault_a", vault_key, self.audit, clock=self.clock.now
        )
        self.vault_b = SecretVault(
            config.data_root / "vault_b", vault_key, self.audit, clock=self.clock.now
        )
        retention = RetentionPolicy(
            ttl={
                "encrypted-document": config.document_ttl_days * DAY,
                "analysis-result": config.result_ttl_days * DAY,
            }
        )
        self.store = ObjectStore(
            config.data_root, store_key, self.audit, clock=self.clock, retention=retention
        )
        self.analyzer = analyzer or TechniqueExtractor()

        self._lock = threading.RLock()
        self._sessions: dict[str, UploadSession] = {}
        self._documents: dict[str, DocumentMeta] = {}
        self._analyses: dict[str, AnalysisRecord] = {}
        self._analysis_in_flight: set[str] = set()
        self._meta_dir = config.data_root / "meta"
        self._meta_dir.mkdir(parents=True, exist_ok=True)
        self._load_meta()

        if config.kek_mode == "single":
            existing = self.vault_a.latest_handle(APP_KEK_NAME)
            self.app_kek = existing or self.vault_a.create_rsa_key(APP_KEK_NAME, self.backend)
        else:
            self.app_kek = None

    # --- metadata persistence ----------------------------------------------

    def _load_meta(self) -> None:
        doc_path = self._meta_dir / "documents.json"
        if doc_path.exists():
            for d in json.loads(doc_path.read_text()):
                self._documents[d["document_id"]] = DocumentMeta(**d)
        an_path = self._meta_dir / "analyses.json"
        if an_path.exists():
            for d in json.loads(an_path.read_text()):
                self._analyses[d["analysis_id"]] = AnalysisRecord(**d)

    def _save_meta(self) -> None:
        (self._meta_dir / "documents.json").write_text(
            json.dumps([vars(m) for m in self._documents.values()])
        )
        (self._meta_dir / "analyses.json").write_text(
            json.dumps([vars(a) for a in self._analyses.values()])
        )

    # --- helpers ------------------------------------------------------------

    def _principal(self, token: str) -> Principal:
        return self.idp.validate_token(token, now=self.clock.now())

    def _check(
        self,
        principal: Principal,
        action: str,
        resource: str,
        op: str,
        correlation_id: str,
    ) -> None:
        decision = authorize(principal.name, principal.roles, action, resource)
        if not decision.allowed:
            self.audit.record(
                principal=principal.name,
                op=op,
                resource=resource,
                outcome="denied",
                details={"correlation_id": correlation_id, "reason": decision.reason},
            )
            raise Unauthorized(decision.reason)

    @staticmethod
    def _cid() -> str:
        return uuid.uuid4().hex

    # --- workflows ----------------------------------------------------------

    def login(self, username: str, password: str) -> str:
        return self.idp.authenticate(username, password, now=self.clock.now())

    def begin_upload(self, token: str) -> dict:
        cid = self._cid()
        principal = self._principal(token)
        self._check(principal, "upload", "", "upload", cid)
        now = self.clock.now()
        session_id = "us-" + uuid.uuid4().hex
        if self.config.kek_mode == "single":
            handle = self.app_kek
        else:
            handle = self.vault_a.create_rsa_key(
                f"doc-kek-{session_id}", self.backend, correlation_id=cid
            )
        public_pem = self.vault_a.get_public_key(handle, self.backend)
        session = UploadSession(
            session_id=session_id,
            kek_handle=handle,
            public_pem=public_pem,
            created_at=now,
            expires_at=now + SESSION_LIFETIME_SECONDS,
            uploader=principal.name,
        )
        with self._lock:
            self._sessions[session_id] = session
        self.audit.record(
            principal=principal.name,
            op="upload",
            resource=session_id,
            outcome="success",
            details={"correlation_id": cid, "phase": "begin"},
        )
        return {
            "session_id": session_id,
            "public_key_pem": public_pem,
            "kek_name": handle.name,
            "kek_version": handle.version,
        }

    def complete_upload(self, token: str, session_id: str, envelope_bytes: bytes) -> str:
        cid = self._cid()
        principal = self._principal(token)
        self._check(principal, "upload", session_id, "upload", cid)
        now = self.clock.now()
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None or now > session.expires_at or session.uploader != principal.name:
                # Unknown, expired, and foreign sessions share one shape.
                self.audit.record(
                    principal=principal.name,
                    op="upload",
                    resource=session_id,
                    outcome="error",
                    details={"correlation_id": cid, "reason": "session expired or unknown"},
                )
                raise SessionExpired("upload session expired or unknown")
            if session.consumed:
                raise SessionConsumed(f"session {session_id} already consumed")
        envelope = decode_envelope(envelope_bytes)
        if (
            envelope.wrapped_key.kek_name != session.kek_handle.name
            or envelope.wrapped_key.kek_version != session.kek_handle.version
        ):
            raise KekMismatch("envelope was wrapped under a different KEK")
        document_id = envelope.document_id
        with self._lock:
            if document_id in self._documents:
                raise DuplicateDocument(f"document {document_id!r} already exists")
        # The upload path never decrypts: no unwrapKey, no plaintext.
        blob = envelope.payload.nonce + envelope.payload.ciphertext_and_tag
        self.store.put_blob(
            "documents",
            document_id,
            blob,
            "encrypted-document",
            principal.name,
            self.backend,
            correlation_id=cid,
        )
        self.vault_b.put_secret(
            document_id, envelope.wrapped_key, self.backend, correlation_id=cid
        )
        with self._lock:
            session.consumed = True
            self._documents[document_id] = DocumentMeta(
                document_id=document_id,
                uploader=principal.name,
                created_at=now,
                kek_name=envelope.wrapped_key.kek_name,
                kek_version=envelope.wrapped_key.kek_version,
                nonce_hex=envelope.payload.nonce.hex(),
            )
            self._save_meta()
        self.audit.record(
            principal=principal.name,
            op="upload",
            resource=document_id,
            outcome="success",
            details={"correlation_id": cid, "phase": "complete"},
        )
        return document_id

    def list_documents(self, token: str) -> list[dict]:
        principal = self._principal(token)
        cid = self._cid()
        with self._lock:
            live = [m for m in self._documents.values() if m.status == "stored"]
        if Role.BlueTeam in principal.roles:
            self._check(principal, "list_documents", "", "list_documents", cid)
            docs = live
        elif Role.RedTeam in principal.roles:
            self._check(principal, "list_own_documents", "", "list_documents", cid)
            docs = [m for m in live if m.uploader == principal.name]
        else:
            self.audit.record(
                principal=principal.name,
                op="list_documents",
                resource="documents",
                outcome="denied",
                details={"correlation_id": cid, "reason": "no role grants document listing"},
            )
            raise Unauthorized("no role grants document listing")
        return [m.public_dict() for m in sorted(docs, key=lambda m: m.document_id)]

    def initiate_analysis(self, token: str, document_id: str) -> dict:
        cid = self._cid()
        principal = self._principal(token)
        self._check(principal, "initiate_analysis", document_id, "initiate_analysis", cid)
        with self._lock:
            meta = self._documents.get(document_id)
            if meta is None or meta.status != "stored":
                self.audit.record(
                    principal=principal.name,
                    op="initiate_analysis",
                    resource=document_id,
                    outcome="error",
                    details={
                        "correlation_id": cid,
                        "reason": "purged" if meta is not None else "unknown document",
                    },
                )
                raise DocumentNotFound(f"no document {document_id!r}")
            if document_id in self._analysis_in_flight:
                raise AnalysisInProgress(f"analysis already running for {document_id!r}")
            self._analysis_in_flight.add(document_id)
        key = None
        buffer = None
        try:
            # Integrity of the stored record is checked before any key release.
            try:
                blob, _ = self.store.get_blob(
                    "documents", document_id, self.backend, correlation_id=cid
                )
            except BlobNotFound:
                self._audit_analysis_error(principal, document_id, cid, "document blob missing")
                raise DocumentNotFound(f"no document {document_id!r}") from None
            except IntegrityError:
                self._audit_analysis_error(principal, document_id, cid, "at-rest integrity failure")
                raise
            try:
                wrapped = self.vault_b.get_secret(document_id, self.backend, correlation_id=cid)
            except SecretNotFound:
                self._audit_analysis_error(principal, document_id, cid, "wrapped key missing")
                raise DocumentNotFound(f"no wrapped key for {document_id!r}") from None
            handle = KeyHandle(
                name=meta.kek_name, version=meta.kek_version, created_at=0.0, enabled=True
            )
            key = self.vault_a.unwrap_key(handle, wrapped, self.backend, correlation_id=cid)
            payload = EncryptedPayload(nonce=blob[:NONCE_LEN], ciphertext_and_tag=blob[NONCE_LEN:])
            try:
                buffer = crypto_envelope.decrypt_document(payload, key)
            except AuthenticationFailed:
                self._audit_analysis_error(principal, document_id, cid, "GCM verification failed")
                raise IntegrityError(f"document {document_id!r} fails integrity checks") from None
            try:
                result = self.analyzer.analyze(buffer, document_id, now=self.clock.now())
            except LockboxError:
                raise
            except Exception as exc:
                self._audit_analysis_error(principal, document_id, cid, "analyzer failure")
                raise AnalysisFailed("analysis failed") from exc
        finally:
            # Structural scrub: every exit path releases key and plaintext.
            if key is not None:
                key.wipe()
            if buffer is not None:
                buffer.wipe()
            with self._lock:
                self._analysis_in_flight.discard(document_id)
        analysis_id = "an-" + uuid.uuid4().hex
        result_bytes = json.dumps(result.to_dict(), sort_keys=True).encode("utf-8")
        self.store.put_blob(
            "results",
            analysis_id,
            result_bytes,
            "analysis-result",
            principal.name,
            self.backend,
            correlation_id=cid,
        )
        record = AnalysisRecord(
            analysis_id=analysis_id,
            document_id=document_id,
            initiator=principal.name,
            started_at=self.clock.now(),
            status="complete",
            result_blob_id=analysis_id,
        )
        with self._lock:
            self._analyses[analysis_id] = record
            self._save_meta()
        self.audit.record(
            principal=principal.name,
            op="initiate_analysis",
            resource=document_id,
            outcome="success",
            details={"correlation_id": cid, "analysis_id": analysis_id},
        )
        return {"analysis_id": analysis_id, "status": record.status}

    def _audit_analysis_error(
        self, principal: Principal, document_id: str, cid: str, reason: str
    ) -> None:
        self.audit.record(
            principal=principal.name,
            op="initiate_analysis",
            resource=document_id,
            outcome="error",
            details={"correlation_id": cid, "reason": reason},
        )

    def get_result(self, token: str, analysis_id: str) -> dict:
        cid = self._cid()
        principal = self._principal(token)
        self._check(principal, "get_result", analysis_id, "get_result", cid)
        with self._lock:
            record = self._analyses.get(analysis_id)
        if record is None:
            raise ResultNotFound(f"no analysis {analysis_id!r}")
        if record.initiator != principal.name:
            self.audit.record(
                principal=principal.name,
                op="get_result",
                resource=analysis_id,
                outcome="denied",
                details={"correlation_id": cid, "reason": "not the initiator"},
            )
            raise NotInitiator("results are visible to the initiating analyst only")
        try:
            data, _ = self.store.get_blob(
                "results", record.result_blob_id, self.backend, correlation_id=cid
            )
        except BlobNotFound:
            raise ResultNotFound(f"result for {analysis_id!r} is gone") from None
        self.audit.record(
            principal=principal.name,
            op="get_result",
            resource=analysis_id,
            outcome="success",
            details={"correlation_id": cid},
        )
        return json.loads(data.decode("utf-8"))

    def query_audit(self, token: str, **filters: Any) -> list[dict]:
        principal = self._principal(token)
        allowed = authorize(principal.name, principal.roles, "query_audit", "audit").allowed or (
            Role.ServiceBackend in principal.roles
        )
        if not allowed:
            raise Unauthorized("audit queries require the Auditor role")
        events = self.audit.query(**filters)
        return [json.loads(e.to_json()) for e in events]

    def retention_sweep(self, token: Optional[str], now: Optional[float] = None) -> list[str]:
        if token is not None:
            principal = self._principal(token)
            self._check(principal, "retention_sweep", "store", "purge", self._cid())
        purged = self.store.run_retention_sweep(now=now)
        with self._lock:
            changed = False
            for document_id in purged:
                meta = self._documents.get(document_id)
                if meta is not None:
                    meta.status = "purged"
                    changed = True
            if changed:
                self._save_meta()
        return purged


def _require_env(var: str) -> str:
    import os

    value = os.environ.get(var)
    if not value:
        raise LockboxError(f"{var} is not set")
    return value


# --- HTTP layer -------------------------------------------------------------

STATUS_BY_CODE = {
    "invalid_credentials": 401,
    "token_invalid": 401,
    "token_expired": 401,
    "unauthorized": 403,
    "not_initiator": 403,
    "session_expired": 404,
    "document_not_found": 404,
    "result_not_found": 404,
    "blob_not_found": 404,
    "secret_not_found": 404,
    "key_not_found": 404,
    "session_consumed": 409,
    "duplicate_document": 409,
    "duplicate_blob": 409,
    "duplicate_secret": 409,
    "analysis_in_progress": 409,
    "integrity_error": 409,
    "authentication_failed": 409,
    "malformed_envelope": 400,
    "kek_mismatch": 400,
    "key_disabled": 409,
    "unwrap_failure": 409,
}


def create_app(service: LockboxService) -> "FastAPI":
    app = FastAPI(title="lockbox")
    app.state.service = service
    app.state.boundary_violations = []

    @app.exception_handler(LockboxError)
    async def _lockbox_error(request: Request, exc: LockboxError):
        return JSONResponse(
            status_code=STATUS_BY_CODE.get(exc.code, 500),
            content={"error": exc.code, "message": str(exc)},
        )

    @app.middleware("http")
    async def _plaintext_boundary_check(request: Request, call_next):
        before = instrumentation.live_plaintext_buffers
        if before != 0:
            app.state.boundary_violations.append(("before", request.url.path, before))
        response = await call_next(request)
        after = instrumentation.live_plaintext_buffers
        if after != 0:
            app.state.boundary_violations.append(("after", request.url.path, after))
        return response

    def _token(request: Request) -> str:
        header = request.headers.get("authorization", "")
        if not header.startswith("Bearer "):
            raise Unauthorized("missing bearer token")
        return header[len("Bearer ") :]

    @app.post("/auth/login")
    async def login(body: dict):
        token = service.login(body.get("username", ""), body.get("password", ""))
        return {"token": token}

    @app.post("/uploads/begin")
    async def uploads_begin(request: Request):
        return service.begin_upload(_token(request))

    @app.post("/uploads/{session_id}/complete")
    async def uploads_complete(session_id: str, request: Request):
        envelope = await request.body()
        document_id = service.complete_upload(_token(request), session_id, envelope)
        return {"document_id": document_id}

    @app.get("/documents")
    async def documents(request: Request):
        return service.list_documents(_token(request))

    @app.post("/documents/{document_id}/analyze")
    async def analyze(document_id: str, request: Request):
        return service.initiate_analysis(_token(request), document_id)

    @app.get("/analyses/{analysis_id}")
    async def analysis_result(analysis_id: str, request: Request):
        return service.get_result(_token(request), analysis_id)

    @app.get("/audit")
    async def audit(request: Request):
        params = request.query_params
        filters: dict[str, Any] = {}
        if params.get("op"):
            filters["op"] = params["op"]
        if params.get("principal"):
            filters["principal"] = params["principal"]
        if params.get("outcome"):
            filters["outcome"] = params["outcome"]
        if params.get("from"):
            filters["since"] = float(params["from"])
        if params.get("to"):
            filters["until"] = float(params["to"])
        return service.query_audit(_token(request), **filters)

    @app.post("/admin/retention/sweep")
    async def sweep(request: Request):
        try:
            body = json.loads(await request.body() or b"{}")
        except json.JSONDecodeError:
            body = {}
        now = body.get("now")
        purged = service.retention_sweep(_token(request), now=now)
        return {"purged": purged}

    return app


def main(argv: Optional[list[str]] = None) -> None:
    import uvicorn

    parser = argparse.ArgumentParser(prog="lockbox-server")
    parser.add_argument("--config", required=True, help="path to the JSON config file")
    args = parser.parse_args(argv)
    config = ServerConfig.from_file(args.config)
    service = LockboxService(config)
    host, _, port = config.listen_addr.partition(":")
    uvicorn.run(create_app(service), host=host, port=int(port or "8777"))


if __name__ == "__main__":
    main()
