"""Chain header encoding, per-hop sealing, and proof-of-transit tokens."""

from __future__ import annotations

import enum
import hashlib
import os
import struct
import time
from collections import Counter
from dataclasses import dataclass, replace
from typing import Mapping, Sequence, TypeVar, Union

from cryptography.hazmat.primitives.asymmetric import ec

from .http11 import Request, Response
from .sealing import SealError, b64decode, b64encode, open_sealed, seal
from .trust_policy import ChainPlan, PolicyViolation, check_address

CHAIN_HEADER = "X-SFC-Chain"
SEALED_CHAIN_HEADER = "X-SFC-Sealed-Chain"
POT_HEADER = "X-SFC-PoT"
REQUEST_ID_HEADER = "X-SFC-Request-ID"
ORIGIN_HEADER = "X-SFC-Origin"
INTERNAL_PREFIX = "x-sfc-"
DEVICE_ASSERTION_HEADER = "X-Device-Assertion"

_HOP_INFO = b"ztsfc-hop/1"
_POT_INFO = b"ztsfc-pot/1"
_POT_VERSION = 1


class ChainError(ValueError):
    """Chain header cannot be built or parsed."""


class EncodingError(ChainError):
    pass


class ChainProtocolError(ChainError):
    pass


class SealingConfigError(ChainError):
    """A hop has no sealing key; the chain must not be sent."""


class Mode(enum.Enum):
    PLAIN = "plain"
    SEALED = "sealed"

    @property
    def header(self) -> str:
        return CHAIN_HEADER if self is Mode.PLAIN else SEALED_CHAIN_HEADER


@dataclass(frozen=True)
class ChainHeaderValue:
    entries: tuple[str, ...]
    mode: Mode = Mode.PLAIN

    def __post_init__(self):
        if not self.entries:
            raise ChainProtocolError("a chain header carries at least one entry")
        for entry in self.entries:
            if self.mode is Mode.PLAIN:
                try:
                    check_address(entry)
                except PolicyViolation as exc:
                    raise EncodingError(str(exc)) from None
            else:
                try:
                    b64decode(entry)
                except ValueError:
                    raise EncodingError(f"sealed entry is not base64: {entry[:16]!r}") from None

    @property
    def header(self) -> str:
        return self.mode.header

    def render(self) -> str:
        return ",".join(self.entries)

    @classmethod
    def parse(cls, value: str, mode: Mode = Mode.PLAIN) -> ChainHeaderValue:
        if value is None or not value.strip():
            raise ChainProtocolError("empty chain header")
        try:
            return cls(tuple(e.strip() for e in value.split(",")), mode)
        except EncodingError as exc:
            raise ChainProtocolError(str(exc)) from None


@dataclass(frozen=True)
class SealedEntry:
    recipient: str
    ciphertext: str


def encode_chain(hops: Sequence[str]) -> ChainHeaderValue | None:
    """Plain chain over ``hops``; ``None`` means the header must be omitted."""
    if not hops:
        return None
    for hop in hops:
        if any(c in hop for c in ", \t\r\n") or any(ord(c) < 32 or ord(c) == 127 for c in hop):
            raise EncodingError(f"hop address contains a delimiter: {hop!r}")
    return ChainHeaderValue(tuple(hops), Mode.PLAIN)


def pop_next_hop(value: ChainHeaderValue | str) -> tuple[str, ChainHeaderValue | None]:
    if isinstance(value, str):
        value = ChainHeaderValue.parse(value)
    head, *rest = value.entries
    return head, (ChainHeaderValue(tuple(rest), value.mode) if rest else None)


def seal_chain(hops: Sequence[tuple[str, str]], keys: Mapping[str, ec.EllipticCurvePublicKey]) -> ChainHeaderValue:
    """Seal each address to the function that reads it.

    ``hops`` is ``[(reader, address), ...]``: entry ``i`` holds ``address``
    and only ``reader`` can open it.
    """
    if not hops:
        raise EncodingError("nothing to seal")
    missing = [reader for reader, _ in hops if reader not in keys]
    if missing:
        raise SealingConfigError(f"no sealing key for {missing}")
    encode_chain([addr for _, addr in hops])
    return ChainHeaderValue(
        tuple(b64encode(seal(keys[reader], addr.encode(), _HOP_INFO)) for reader, addr in hops),
        Mode.SEALED,
    )


def open_entry(entry: SealedEntry | str, private_key: ec.EllipticCurvePrivateKey) -> str:
    text = entry.ciphertext if isinstance(entry, SealedEntry) else entry
    try:
        address = open_sealed(private_key, b64decode(text), _HOP_INFO).decode()
    except (ValueError, UnicodeDecodeError) as exc:
        raise SealError(str(exc)) from None
    try:
        return check_address(address)
    except PolicyViolation as exc:
        raise SealError(str(exc)) from None


def request_digest(method: str, target: str, body: bytes) -> bytes:
    h = hashlib.sha256()
    h.update(method.encode("latin-1") + b"\0")
    h.update(target.encode("latin-1") + b"\0")
    h.update(hashlib.sha256(body).digest())
    return h.digest()


def digest_of(request: Request) -> bytes:
    return request_digest(request.method, request.target, request.body)


@dataclass(frozen=True)
class PotToken:
    request_id: bytes
    function_id: str
    request_digest: bytes
    issued_at: int
    ciphertext: str = ""

    def plaintext(self) -> bytes:
        return (
            struct.pack(">B16sQ32s", _POT_VERSION, self.request_id, self.issued_at, self.request_digest)
            + self.function_id.encode()
        )

    @classmethod
    def from_plaintext(cls, data: bytes, ciphertext: str) -> PotToken:
        if len(data) < 57 or data[0] != _POT_VERSION:
            raise SealError("unrecognised token layout")
        _, rid, issued, digest = struct.unpack(">B16sQ32s", data[:57])
        return cls(rid, data[57:].decode(), digest, issued, ciphertext)


def make_pot_token(request_id: bytes, function_id: str, request_digest: bytes,
                   pep_public_key: ec.EllipticCurvePublicKey, now: float | None = None) -> PotToken:
    if len(request_id) != 16 or len(request_digest) != 32:
        raise ValueError("request_id must be 16 bytes and digest 32 bytes")
    issued = int(time.time() if now is None else now)
    token = PotToken(request_id, function_id, request_digest, issued)
    return replace(token, ciphertext=b64encode(seal(pep_public_key, token.plaintext(), _POT_INFO)))


def open_pot_token(text: str, pep_private_key: ec.EllipticCurvePrivateKey) -> PotToken:
    try:
        data = open_sealed(pep_private_key, b64decode(text), _POT_INFO)
        return PotToken.from_plaintext(data, text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise SealError(str(exc)) from None


@dataclass(frozen=True)
class Ok:
    pass


@dataclass(frozen=True)
class Fail:
    reason: str


PotResult = Union[Ok, Fail]


def verify_pot(tokens: Sequence[str | PotToken], expected: ChainPlan | Sequence[str],
               request_id: bytes, request_digest: bytes,
               pep_private_key: ec.EllipticCurvePrivateKey) -> PotResult:
    """Check that every planned function left exactly one intact token."""
    planned = expected.function_ids if isinstance(expected, ChainPlan) else tuple(expected)
    opened = []
    for tok in tokens:
        text = tok.ciphertext if isinstance(tok, PotToken) else tok
        try:
            opened.append(open_pot_token(text, pep_private_key))
        except SealError:
            return Fail("changed")
    seen = Counter()
    for tok in opened:
        if tok.request_id != request_id or tok.function_id not in planned:
            return Fail("unexpected token")
        seen[tok.function_id] += 1
        if seen[tok.function_id] > 1:
            return Fail("unexpected token")
        if tok.request_digest != request_digest:
            return Fail("changed")
    if any(fid not in seen for fid in planned):
        return Fail("absent")
    return Ok()


def parse_pot_header(value: str | None) -> list[str]:
    if not value:
        return []
    return [t.strip() for t in value.split(",") if t.strip()]


def new_request_id() -> bytes:
    return os.urandom(16)


M = TypeVar("M", Request, Response)


def is_internal(name: str) -> bool:
    lname = name.lower()
    return lname.startswith(INTERNAL_PREFIX) or lname == DEVICE_ASSERTION_HEADER.lower()


def strip_internal_headers(message: M) -> M:
    return message.with_headers(message.headers.filter(lambda name: not is_internal(name)))
