"""Token composition, constant-time comparison, keys, and channel crypto.

Primitives (SHA-256, HMAC, Ed25519, X25519, HKDF, ChaCha20-Poly1305) come
from hashlib/hmac and the pyca cryptography package. What is defined here,
and covered bit-for-bit by the test suite, is the composition:

* the 96-byte token preimage ``chal(32) || pk(32) || m(32)``,
* the token itself, ``Sign(K, SHA-256(preimage))`` in either HMAC-SHA256
  mode (32-byte tag) or Ed25519 mode (64-byte detached signature over the
  32-byte digest),
* the constant-time equality used wherever a secret-derived value is
  compared,
* session-key derivation for the post-attestation channel.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import os
import stat
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

DIGEST_LEN = 32
CHAL_LEN = 32
PK_LEN = 32
SEED_LEN = 32
HMAC_SIG_LEN = 32
ED25519_SIG_LEN = 64
PREIMAGE_LEN = CHAL_LEN + PK_LEN + DIGEST_LEN
SESSION_KEY_LEN = 32
NONCE_LEN = 12

CHANNEL_AD_INIT = b"attest-channel init"
CHANNEL_AD_CONFIRM = b"attest-channel confirm"


class CryptoError(Exception):
    """Base for key, token, and channel failures."""


class LengthMismatchError(CryptoError):
    pass


class AllZeroSharedSecretError(CryptoError):
    """X25519 produced the all-zero point (low-order peer key)."""


class KeystoreError(CryptoError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def ct_equal(a: bytes, b: bytes) -> bool:
    """Constant-time equality for equal-length byte strings.

    XORs the operands as fixed-width byte vectors and OR-reduces to a
    single accumulator; there is no early exit and no data-dependent
    branch. The vector ops run in machine-width registers, which keeps
    the timing profile flat where Python's variable-width integers do
    not (interpreter fast paths make zero operands measurably cheaper).
    """
    if len(a) != len(b):
        raise LengthMismatchError(f"lengths {len(a)} and {len(b)}")
    av = np.frombuffer(bytes(a), dtype=np.uint8)
    bv = np.frombuffer(bytes(b), dtype=np.uint8)
    acc = int(np.bitwise_or.reduce(av ^ bv, initial=0))
    return acc == 0


# --- signing keys ---------------------------------------------------------

class SignMode(Enum):
    HMAC = "hmac"
    ED25519 = "eddsa"


class SignKey:
    """Device signing secret: a 32-byte seed plus the mode fixed at boot.

    In HMAC mode the seed is the MAC key and the verifier holds the same
    bytes. In Ed25519 mode the seed is the private scalar seed and the
    verifier holds only the derived public key. The repr never shows the
    secret; ``zeroize()`` scrubs it in place.
    """

    __slots__ = ("mode", "_secret")

    def __init__(self, mode: SignMode, secret: bytes):
        if len(secret) != SEED_LEN:
            raise LengthMismatchError(f"signing secret must be {SEED_LEN} bytes")
        self.mode = mode
        self._secret = bytearray(secret)

    @classmethod
    def generate(cls, mode: SignMode) -> "SignKey":
        return cls(mode, os.urandom(SEED_LEN))

    def secret_bytes(self) -> bytes:
        return bytes(self._secret)

    def verify_key(self) -> "VerifyKey":
        if self.mode is SignMode.HMAC:
            return VerifyKey(SignMode.HMAC, bytes(self._secret))
        return VerifyKey(SignMode.ED25519, ed25519_public_key(bytes(self._secret)))

    def zeroize(self) -> None:
        for i in range(len(self._secret)):
            self._secret[i] = 0

    def __repr__(self) -> str:
        return f"SignKey(mode={self.mode.value}, secret=<redacted>)"


@dataclass(frozen=True)
class VerifyKey:
    """What the verifier stores per device: mode plus key material."""

    mode: SignMode
    material: bytes

    @classmethod
    def from_hex(cls, mode: Union[SignMode, str], hex_material: str) -> "VerifyKey":
        if isinstance(mode, str):
            mode = SignMode(mode)
        material = bytes.fromhex(hex_material)
        if len(material) != 32:
            raise LengthMismatchError("verify key material must be 32 bytes")
        return cls(mode, material)


@dataclass(frozen=True)
class AttestToken:
    mode: SignMode
    sig: bytes

    def __post_init__(self):
        want = HMAC_SIG_LEN if self.mode is SignMode.HMAC else ED25519_SIG_LEN
        if len(self.sig) != want:
            raise LengthMismatchError(
                f"{self.mode.value} token must be {want} bytes, got {len(self.sig)}")


# --- token composition ----------------------------------------------------

def attest_preimage(chal: bytes, pk: bytes, m: bytes) -> bytes:
    """``chal || pk || m``, exactly 96 bytes, built by nested concatenation."""
    if len(chal) != CHAL_LEN:
        raise LengthMismatchError(f"chal must be {CHAL_LEN} bytes")
    if len(pk) != PK_LEN:
        raise LengthMismatchError(f"pk must be {PK_LEN} bytes")
    if len(m) != DIGEST_LEN:
        raise LengthMismatchError(f"m must be {DIGEST_LEN} bytes")
    head = chal + pk
    assert len(head) == CHAL_LEN + PK_LEN
    return head + m


def attest_token(key: SignKey, chal: bytes, pk: bytes, m: bytes) -> AttestToken:
    """Sign the SHA-256 digest of the preimage under the key's mode."""
    digest = sha256(attest_preimage(chal, pk, m))
    if key.mode is SignMode.HMAC:
        sig = _hmac.new(key.secret_bytes(), digest, hashlib.sha256).digest()
    else:
        sig = ed25519_sign(key.secret_bytes(), digest)
    return AttestToken(key.mode, sig)


def verify_token(vk: VerifyKey, chal: bytes, pk: bytes, m: bytes,
                 token: AttestToken) -> bool:
    """Check a token against the expected preimage; never raises on a bad
    signature, only on malformed inputs."""
    if token.mode is not vk.mode:
        return False
    digest = sha256(attest_preimage(chal, pk, m))
    if vk.mode is SignMode.HMAC:
        expected = _hmac.new(vk.material, digest, hashlib.sha256).digest()
        return ct_equal(expected, token.sig)
    pub = Ed25519PublicKey.from_public_bytes(vk.material)
    try:
        pub.verify(token.sig, digest)
    except InvalidSignature:
        return False
    return True


# --- Ed25519 / X25519 wrappers -------------------------------------------

def ed25519_public_key(seed: bytes) -> bytes:
    if len(seed) != SEED_LEN:
        raise LengthMismatchError(f"seed must be {SEED_LEN} bytes")
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    return priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def ed25519_sign(seed: bytes, message: bytes) -> bytes:
    if len(seed) != SEED_LEN:
        raise LengthMismatchError(f"seed must be {SEED_LEN} bytes")
    return Ed25519PrivateKey.from_private_bytes(seed).sign(message)


def x25519_public_key(private: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(private).public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def x25519_shared(private: bytes, peer_public: bytes) -> bytes:
    """Raw X25519; rejects the contributory-behavior failure case."""
    priv = X25519PrivateKey.from_private_bytes(private)
    pub = X25519PublicKey.from_public_bytes(peer_public)
    try:
        return priv.exchange(pub)
    except ValueError as e:
        raise AllZeroSharedSecretError(str(e)) from e


def derive_session_key(private: bytes, peer_public: bytes,
                       transcript: bytes) -> bytes:
    """HKDF-SHA256 over the X25519 shared secret, bound to the attestation
    transcript (chal || pk || sigma) via the info parameter."""
    ikm = x25519_shared(private, peer_public)
    return HKDF(algorithm=SHA256(), length=SESSION_KEY_LEN, salt=None,
                info=transcript).derive(ikm)


def seal(key: bytes, nonce: bytes, plaintext: bytes, ad: bytes) -> bytes:
    if len(nonce) != NONCE_LEN:
        raise LengthMismatchError(f"nonce must be {NONCE_LEN} bytes")
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, ad)


def open_sealed(key: bytes, nonce: bytes, ciphertext: bytes, ad: bytes) -> Optional[bytes]:
    """AEAD open; returns None on authentication failure."""
    if len(nonce) != NONCE_LEN:
        raise LengthMismatchError(f"nonce must be {NONCE_LEN} bytes")
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, ad)
    except InvalidTag:
        return None


# --- keystore file --------------------------------------------------------
#
# Two lines: 64 hex chars of secret, then a mode tag ("hmac" or "eddsa").
# World-readable keystores are refused outright.

def load_keystore(path: str) -> SignKey:
    st = os.stat(path)
    if stat.S_ISREG(st.st_mode) and (st.st_mode & stat.S_IROTH):
        raise KeystoreError(f"{path} is world-readable; refusing to load")
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.strip() for ln in f.read().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise KeystoreError(f"{path}: expected secret line and mode line")
    secret_hex, mode_tag = lines
    if len(secret_hex) != 2 * SEED_LEN:
        raise KeystoreError(f"{path}: secret must be {2 * SEED_LEN} hex chars")
    try:
        secret = bytes.fromhex(secret_hex)
    except ValueError as e:
        raise KeystoreError(f"{path}: invalid hex in secret line") from e
    try:
        mode = SignMode(mode_tag)
    except ValueError as e:
        raise KeystoreError(f"{path}: unknown mode tag {mode_tag!r}") from e
    return SignKey(mode, secret)


def write_keystore(path: str, key: SignKey) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    try:
        os.write(fd, f"{key.secret_bytes().hex()}\n{key.mode.value}\n".encode("ascii"))
    finally:
        os.close(fd)
