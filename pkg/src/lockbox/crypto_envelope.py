"""Cryptographic primitives and the envelope wire format.

AES-256-GCM for document content, RSA-OAEP (SHA-256) for wrapping the
per-document data key, and a fixed binary layout for the transit
container. Plaintext and key material are held in wipeable, taint-marked
buffers so the scrubbing guarantees of the pipeline are mechanically
checkable.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthenticationFailed,
    BufferWiped,
    EntropyUnavailable,
    InvalidKeyLength,
    InvalidNonceLength,
    MalformedEnvelope,
    PolicyViolation,
    WrapFailure,
)

DATA_KEY_LEN = 32
NONCE_LEN = 12
GCM_TAG_LEN = 16
MIN_KEK_BITS = 3072

ENVELOPE_MAGIC = b"LBX1"
ENVELOPE_VERSION = 1

RandomSource = Callable[[int], bytes]


class Instrumentation:
    """Live counts of unwiped sensitive values.

    The counts back the "no residual plaintext or key material" checks:
    a request boundary with a nonzero count means a scrub was missed.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._live_data_keys = 0
        self._live_plaintext_buffers = 0

    def _adjust(self, attr: str, delta: int) -> None:
        with self._lock:
            setattr(self, attr, getattr(self, attr) + delta)

    @property
    def live_data_keys(self) -> int:
        return self._live_data_keys

    @property
    def live_plaintext_buffers(self) -> int:
        return self._live_plaintext_buffers

    def reset(self) -> None:
        """Zero the counters; for test isolation only."""
        with self._lock:
            self._live_data_keys = 0
            self._live_plaintext_buffers = 0


instrumentation = Instrumentation()


class DataKey:
    """Single-use 256-bit AES key. ``wipe()`` zeroes the backing bytes."""

    def __init__(self, material: bytes) -> None:
        if len(material) != DATA_KEY_LEN:
            raise InvalidKeyLength(f"data key must be {DATA_KEY_LEN} bytes, got {len(material)}")
        self._buf = bytearray(material)
        self._wiped = False
        instrumentation._adjust("_live_data_keys", 1)

    @property
    def wiped(self) -> bool:
        return self._wiped

    def reveal(self) -> bytes:
        if self._wiped:
            raise BufferWiped("data key has been wiped")
        return bytes(self._buf)

    def wipe(self) -> None:
        if self._wiped:
            return
        for i in range(len(self._buf)):
            self._buf[i] = 0
        self._wiped = True
        instrumentation._adjust("_live_data_keys", -1)


class PlaintextBuffer:
    """Taint-marked, wipeable plaintext.

    The taint can never be cleared; storage and audit sinks reject any
    tainted value outright. Only analyzer output (a distinct, untainted
    type) may cross the trust boundary.
    """

    def __init__(self, data: bytes) -> None:
        self._buf = bytearray(data)
        self._wiped = False
        instrumentation._adjust("_live_plaintext_buffers", 1)

    @property
    def tainted(self) -> bool:
        return True

    @property
    def wiped(self) -> bool:
        return self._wiped

    def __len__(self) -> int:
        if self._wiped:
            raise BufferWiped("plaintext buffer has been wiped")
        return len(self._buf)

    def data(self) -> bytes:
        if self._wiped:
            raise BufferWiped("plaintext buffer has been wiped")
        return bytes(self._buf)

    def wipe(self) -> None:
        if self._wiped:
            return
        for i in range(len(self._buf)):
            self._buf[i] = 0
        self._wiped = True
        instrumentation._adjust("_live_plaintext_buffers", -1)


@dataclass(frozen=True)
class EncryptedPayload:
    nonce: bytes
    ciphertext_and_tag: bytes  # GCM tag is the final 16 bytes

    def __post_init__(self) -> None:
        if len(self.nonce) != NONCE_LEN:
            raise InvalidNonceLength(f"nonce must be {NONCE_LEN} bytes, got {len(self.nonce)}")
        if len(self.ciphertext_and_tag) < GCM_TAG_LEN:
            raise MalformedEnvelope("payload shorter than the GCM tag")


@dataclass(frozen=True)
class WrappedDataKey:
    bytes: bytes
    kek_name: str
    kek_version: int


@dataclass(frozen=True)
class Envelope:
    version: int
    document_id: str
    wrapped_key: WrappedDataKey
    payload: EncryptedPayload


def generate_data_key(rng: RandomSource = os.urandom) -> DataKey:
    try:
        material = rng(DATA_KEY_LEN)
    except Exception as exc:
        raise EntropyUnavailable("randomness source failed") from exc
    if not isinstance(material, (bytes, bytearray)) or len(material) != DATA_KEY_LEN:
        raise EntropyUnavailable("randomness source returned a short read")
    return DataKey(bytes(material))


def generate_nonce(rng: RandomSource = os.urandom) -> bytes:
    try:
        nonce = rng(NONCE_LEN)
    except Exception as exc:
        raise EntropyUnavailable("randomness source failed") from exc
    if not isinstance(nonce, (bytes, bytearray)) or len(nonce) != NONCE_LEN:
        raise EntropyUnavailable("randomness source returned a short read")
    return bytes(nonce)


def encrypt_document(plaintext: bytes, key: DataKey, nonce: bytes) -> EncryptedPayload:
    if len(nonce) != NONCE_LEN:
        raise InvalidNonceLength(f"nonce must be {NONCE_LEN} bytes, got {len(nonce)}")
    ct = AESGCM(key.reveal()).encrypt(nonce, bytes(plaintext), None)
    return EncryptedPayload(nonce=bytes(nonce), ciphertext_and_tag=ct)


def decrypt_document(payload: EncryptedPayload, key: DataKey) -> PlaintextBuffer:
    try:
        pt = AESGCM(key.reveal()).decrypt(payload.nonce, payload.ciphertext_and_tag, None)
    except InvalidTag:
        raise AuthenticationFailed("GCM tag verification failed") from None
    return PlaintextBuffer(pt)


def oaep_padding() -> padding.OAEP:
    return padding.OAEP(
        mgf=padding.MGF1(algorithm=hashes.SHA256()),
        algorithm=hashes.SHA256(),
        label=None,
    )


def load_public_key_pem(pem: str) -> rsa.RSAPublicKey:
    key = serialization.load_pem_public_key(pem.encode("utf-8"))
    if not isinstance(key, rsa.RSAPublicKey):
        raise PolicyViolation("KEK public key must be RSA")
    return key


def wrap_data_key(
    key: DataKey,
    kek_public: rsa.RSAPublicKey,
    kek_name: str,
    kek_version: int,
) -> WrappedDataKey:
    if kek_public.key_size < MIN_KEK_BITS:
        raise PolicyViolation(
            f"KEK modulus {kek_public.key_size} bits is below the {MIN_KEK_BITS}-bit floor"
        )
    try:
        wrapped = kek_public.encrypt(key.reveal(), oaep_padding())
    except BufferWiped:
        raise
    except Exception as exc:
        raise WrapFailure("RSA-OAEP encryption failed") from exc
    return WrappedDataKey(bytes=wrapped, kek_name=kek_name, kek_version=kek_version)


# --- wire format ------------------------------------------------------------
#
# magic "LBX1" | version u8 | document_id u16-len + utf8 | kek_name u16-len
# + utf8 | kek_version u32 | wrapped_key u16-len + bytes | nonce 12 bytes |
# payload u64-len + ciphertext_and_tag. All integers big-endian, no
# trailing bytes.


def encode_envelope(e: Envelope) -> bytes:
    if e.version != ENVELOPE_VERSION:
        raise MalformedEnvelope(f"unsupported envelope version {e.version}")
    doc = e.document_id.encode("utf-8")
    kek = e.wrapped_key.kek_name.encode("utf-8")
    if len(doc) > 0xFFFF or len(kek) > 0xFFFF or len(e.wrapped_key.bytes) > 0xFFFF:
        raise MalformedEnvelope("field too long for the wire format")
    if not 0 <= e.wrapped_key.kek_version <= 0xFFFFFFFF:
        raise MalformedEnvelope("kek_version out of range")
    out = bytearray()
    out += ENVELOPE_MAGIC
    out += struct.pack(">B", e.version)
    out += struct.pack(">H", len(doc)) + doc
    out += struct.pack(">H", len(kek)) + kek
    out += struct.pack(">I", e.wrapped_key.kek_version)
    out += struct.pack(">H", len(e.wrapped_key.bytes)) + e.wrapped_key.bytes
    out += e.payload.nonce
    out += struct.pack(">Q", len(e.payload.ciphertext_and_tag))
    out += e.payload.ciphertext_and_tag
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise MalformedEnvelope("truncated envelope")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def done(self) -> bool:
        return self._pos == len(self._data)


def decode_envelope(b: bytes) -> Envelope:
    r = _Reader(bytes(b))
    if r.take(4) != ENVELOPE_MAGIC:
        raise MalformedEnvelope("bad magic")
    (version,) = struct.unpack(">B", r.take(1))
    if version != ENVELOPE_VERSION:
        raise MalformedEnvelope(f"unsupported envelope version {version}")
    (doc_len,) = struct.unpack(">H", r.take(2))
    try:
        document_id = r.take(doc_len).decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedEnvelope("document_id is not valid UTF-8") from None
    (kek_len,) = struct.unpack(">H", r.take(2))
    try:
        kek_name = r.take(kek_len).decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedEnvelope("kek_name is not valid UTF-8") from None
    (kek_version,) = struct.unpack(">I", r.take(4))
    (wrapped_len,) = struct.unpack(">H", r.take(2))
    wrapped = r.take(wrapped_len)
    nonce = r.take(NONCE_LEN)
    (payload_len,) = struct.unpack(">Q", r.take(8))
    ciphertext_and_tag = r.take(payload_len)
    if not r.done():
        raise MalformedEnvelope("trailing bytes after envelope")
    if payload_len < GCM_TAG_LEN:
        raise MalformedEnvelope("payload shorter than the GCM tag")
    return Envelope(
        version=version,
        document_id=document_id,
        wrapped_key=WrappedDataKey(bytes=wrapped, kek_name=kek_name, kek_version=kek_version),
        payload=EncryptedPayload(nonce=nonce, ciphertext_and_tag=ciphertext_and_tag),
    )
