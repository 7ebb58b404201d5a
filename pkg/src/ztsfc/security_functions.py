"""Service-function plug-ins: signature IPS, TOTP-based MFA, and pass-through."""

from __future__ import annotations

import base64
import csv
import hashlib
import hmac
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Union

from .http11 import Request

MAX_INSPECT_BODY = 1024 * 1024
TOTP_STEP = 30
TOTP_DIGITS = 6
SCOPES = ("request-line", "headers", "body")


@dataclass(frozen=True)
class Pass:
    pass


@dataclass(frozen=True)
class Drop:
    reason: str


@dataclass(frozen=True)
class Challenge:
    status: int = 401
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""


Verdict = Union[Pass, Drop, Challenge]


# --- IPS -------------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    rule_id: str
    scope: str
    pattern: re.Pattern


@dataclass(frozen=True)
class IpsRuleset:
    rules: tuple[Rule, ...] = ()


def compile_rule(rule_id: str, scope: str, pattern: str) -> Rule:
    """``re:`` prefixes a regular expression; anything else is a literal."""
    if scope not in SCOPES:
        raise ValueError(f"rule {rule_id}: unknown scope {scope!r}")
    if pattern.startswith("re:"):
        source = pattern[3:]
    else:
        source = re.escape(pattern.removeprefix("lit:"))
    try:
        compiled = re.compile(source.encode("latin-1"))
    except re.error as exc:
        raise ValueError(f"rule {rule_id}: {exc}") from None
    return Rule(rule_id, scope, compiled)


def parse_ruleset(text: str) -> IpsRuleset:
    rules = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise ValueError(f"ruleset line {n}: expected 'id<TAB>scope<TAB>pattern'")
        rules.append(compile_rule(*parts))
    return IpsRuleset(tuple(rules))


def load_ruleset(path: str | Path | None = None) -> IpsRuleset:
    if path is None:
        text = resources.files("ztsfc.data").joinpath("ips_rules.tsv").read_text()
    else:
        text = Path(path).read_text()
    return parse_ruleset(text)


def _scope_bytes(request: Request, scope: str) -> bytes:
    if scope == "request-line":
        return f"{request.method} {request.target} {request.version}".encode("latin-1")
    if scope == "headers":
        return request.headers.to_bytes()
    return request.body


def ips_inspect(request: Request, ruleset: IpsRuleset, max_body: int = MAX_INSPECT_BODY) -> Verdict:
    if len(request.body) > max_body:
        return Drop("oversize")
    for rule in ruleset.rules:
        if rule.pattern.search(_scope_bytes(request, rule.scope)):
            return Drop(rule.rule_id)
    return Pass()


# --- MFA -------------------------------------------------------------------

@dataclass(frozen=True)
class MfaSecretStore:
    secrets: Mapping[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        for user, secret in self.secrets.items():
            if len(secret) < 16:
                raise ValueError(f"secret for {user!r} is shorter than 128 bits")


def decode_base32(secret: str) -> bytes:
    cleaned = secret.replace(" ", "").upper()
    return base64.b32decode(cleaned + "=" * (-len(cleaned) % 8))


def load_mfa_store(path: str | Path) -> MfaSecretStore:
    secrets = {}
    with open(path, newline="") as fh:
        for row in csv.reader(l for l in fh if l.strip() and not l.lstrip().startswith("#")):
            user, secret = (c.strip() for c in row)
            if user == "user_id":
                continue
            secrets[user] = decode_base32(secret)
    return MfaSecretStore(secrets)


def hotp(secret: bytes, counter: int, digits: int = TOTP_DIGITS) -> str:
    mac = hmac.new(secret, struct.pack(">Q", counter), hashlib.sha1).digest()
    offset = mac[-1] & 0x0F
    code = struct.unpack(">I", mac[offset:offset + 4])[0] & 0x7FFFFFFF
    return str(code % 10 ** digits).zfill(digits)


def totp(secret: bytes, now: float, step: int = TOTP_STEP) -> str:
    return hotp(secret, int(now // step))


def totp_matches(secret: bytes, code: str, now: float, window: int = 1) -> bool:
    """Constant-time check of ``code`` against the steps around ``now``."""
    counter = int(now // TOTP_STEP)
    ok = False
    for delta in range(-window, window + 1):
        ok |= hmac.compare_digest(hotp(secret, counter + delta).encode(), code.encode())
    return ok


MFA_CHALLENGE = Challenge(
    401,
    (("WWW-Authenticate", "ZTSFC-MFA"),),
    b"second factor required: send X-MFA-User and X-MFA-Code\n",
)


def mfa_verify(request: Request, store: MfaSecretStore, now: float | None = None) -> Verdict:
    user = request.headers.get("X-MFA-User")
    code = request.headers.get("X-MFA-Code")
    if not user or not code:
        return MFA_CHALLENGE
    secret = store.secrets.get(user)
    if secret is None:
        return Drop("mfa-unknown-user")
    if not (code.isascii() and code.isdigit() and len(code) == TOTP_DIGITS):
        return Drop("mfa-failed")
    if totp_matches(secret, code, time.time() if now is None else now):
        return Pass()
    return Drop("mfa-failed")


# --- pass-through ----------------------------------------------------------

def pass_through(request: Request) -> Verdict:
    return Pass()


class ServiceFunction:
    """Plug-in wrapper with invocation counters shared by the node runtime."""

    def __init__(self, function_id: str, inspect: Callable[[Request], Verdict]):
        self.function_id = function_id
        self._inspect = inspect
        self._lock = threading.Lock()
        self.counters = {"invocations": 0, "passed": 0, "dropped": 0, "challenged": 0}

    def __call__(self, request: Request) -> Verdict:
        verdict = self._inspect(request)
        key = {Pass: "passed", Drop: "dropped", Challenge: "challenged"}[type(verdict)]
        with self._lock:
            self.counters["invocations"] += 1
            self.counters[key] += 1
        return verdict

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self.counters, function_id=self.function_id)


def build_function(function_id: str, behavior: str, *, ruleset: IpsRuleset | None = None,
                   mfa_store: MfaSecretStore | None = None,
                   clock: Callable[[], float] = time.time) -> ServiceFunction:
    if behavior == "ips":
        rs = ruleset if ruleset is not None else load_ruleset()
        return ServiceFunction(function_id, lambda req: ips_inspect(req, rs))
    if behavior == "mfa":
        if mfa_store is None:
            raise ValueError("mfa behavior needs a secret store")
        return ServiceFunction(function_id, lambda req: mfa_verify(req, mfa_store, clock()))
    if behavior == "pass":
        return ServiceFunction(function_id, pass_through)
    raise ValueError(f"unknown function behavior {behavior!r}")
