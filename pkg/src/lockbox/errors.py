"""Error taxonomy for the whole pipeline.

Every error carries a stable machine-readable ``code`` used by the HTTP
layer (JSON error bodies) and the CLI (exit-code mapping).
"""

from __future__ import annotations


class LockboxError(Exception):
    code = "server_error"


# --- crypto / envelope ------------------------------------------------------

class EntropyUnavailable(LockboxError):
    code = "entropy_unavailable"


class InvalidKeyLength(LockboxError):
    code = "invalid_key_length"


class InvalidNonceLength(LockboxError):
    code = "invalid_nonce_length"


class AuthenticationFailed(LockboxError):
    """GCM tag verification failed: tamper, wrong key, or wrong nonce."""
    code = "authentication_failed"


class PolicyViolation(LockboxError):
    code = "policy_violation"


class WrapFailure(LockboxError):
    code = "wrap_failure"


class MalformedEnvelope(LockboxError):
    code = "malformed_envelope"


class BufferWiped(LockboxError):
    code = "buffer_wiped"


# --- identity / authorization ----------------------------------------------

class InvalidCredentials(LockboxError):
    code = "invalid_credentials"


class TokenInvalid(LockboxError):
    code = "token_invalid"


class TokenExpired(LockboxError):
    code = "token_expired"


class Unauthorized(LockboxError):
    code = "unauthorized"


# --- vaults -----------------------------------------------------------------

class KeyNotFound(LockboxError):
    code = "key_not_found"


class KeyDisabled(LockboxError):
    code = "key_disabled"


class KeyGenerationFailure(LockboxError):
    code = "key_generation_failure"


class UnwrapFailure(LockboxError):
    code = "unwrap_failure"


class DuplicateSecret(LockboxError):
    code = "duplicate_secret"


class SecretNotFound(LockboxError):
    code = "secret_not_found"


# --- audit ------------------------------------------------------------------

class AuditUnavailable(LockboxError):
    code = "audit_unavailable"


class PlaintextLeakRejected(LockboxError):
    """A tainted buffer or raw key material reached a storage or log sink."""
    code = "plaintext_leak_rejected"


# --- object store -----------------------------------------------------------

class DuplicateBlob(LockboxError):
    code = "duplicate_blob"


class CategoryMismatch(LockboxError):
    code = "category_mismatch"


class BlobNotFound(LockboxError):
    code = "blob_not_found"


# --- server workflows -------------------------------------------------------

class SessionExpired(LockboxError):
    """Unknown and expired sessions intentionally share this shape."""
    code = "session_expired"


class SessionConsumed(LockboxError):
    code = "session_consumed"


class KekMismatch(LockboxError):
    code = "kek_mismatch"


class DuplicateDocument(LockboxError):
    code = "duplicate_document"


class DocumentNotFound(LockboxError):
    """Covers purged documents as well; audit records the precise cause."""
    code = "document_not_found"


class IntegrityError(LockboxError):
    code = "integrity_error"


class AnalysisFailed(LockboxError):
    code = "analysis_failed"


class AnalysisInProgress(LockboxError):
    code = "analysis_in_progress"


class NotInitiator(LockboxError):
    code = "not_initiator"


class ResultNotFound(LockboxError):
    code = "result_not_found"
