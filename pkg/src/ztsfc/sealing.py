"""Hybrid public-key encryption to a TLS certificate's EC key.

Ephemeral P-256 ECDH, HKDF-SHA256, AES-256-GCM. Wire layout is
``ephemeral point (65) | nonce (12) | ciphertext+tag``.
"""

from __future__ import annotations

import base64
import os

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

_POINT_LEN = 65
_NONCE_LEN = 12


class SealError(Exception):
    """Authenticated decryption failed: wrong recipient or tampered input."""


def _point(key: ec.EllipticCurvePublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)


def _derive(shared: bytes, eph: bytes, recipient: bytes, info: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, salt=None, info=info + eph + recipient).derive(shared)


def seal(public_key: ec.EllipticCurvePublicKey, plaintext: bytes, info: bytes) -> bytes:
    if not isinstance(public_key, ec.EllipticCurvePublicKey) or public_key.curve.name != "secp256r1":
        raise TypeError("sealing requires a P-256 public key")
    eph = ec.generate_private_key(ec.SECP256R1())
    eph_point = _point(eph.public_key())
    key = _derive(eph.exchange(ec.ECDH(), public_key), eph_point, _point(public_key), info)
    nonce = os.urandom(_NONCE_LEN)
    return eph_point + nonce + AESGCM(key).encrypt(nonce, plaintext, info)


def open_sealed(private_key: ec.EllipticCurvePrivateKey, blob: bytes, info: bytes) -> bytes:
    if len(blob) < _POINT_LEN + _NONCE_LEN + 16:
        raise SealError("sealed value too short")
    eph_point = blob[:_POINT_LEN]
    nonce = blob[_POINT_LEN:_POINT_LEN + _NONCE_LEN]
    try:
        eph = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), eph_point)
        shared = private_key.exchange(ec.ECDH(), eph)
    except ValueError as exc:
        raise SealError(f"bad ephemeral key: {exc}") from None
    key = _derive(shared, eph_point, _point(private_key.public_key()), info)
    try:
        return AESGCM(key).decrypt(nonce, blob[_POINT_LEN + _NONCE_LEN:], info)
    except InvalidTag:
        raise SealError("authentication failed") from None


def b64encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64decode(text: str) -> bytes:
    if not text or any(c not in _B64_ALPHABET for c in text):
        raise ValueError("not unpadded url-safe base64")
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


_B64_ALPHABET = frozenset("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_")
