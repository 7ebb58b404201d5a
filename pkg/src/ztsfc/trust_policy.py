"""Trust scoring and chain selection for the policy enforcement point.

Everything in this module is a pure function over immutable inputs. The PEP
loads a :class:`TrustPolicy` and a :class:`DeviceInventory` once and hands
snapshots to request threads.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import hmac
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence, Union

from cryptography import x509

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

ATTRIBUTES = ("cert", "managed")
DEVICE_ASSERTION_HEADER = "X-Device-Assertion"
CHANNEL_BINDING_LABEL = b"EXPORTER-Channel-Binding"
CHANNEL_BINDING_LENGTH = 32

_ADDRESS_RE = re.compile(r"^(\[[0-9A-Fa-f:.]+\]|[A-Za-z0-9][A-Za-z0-9.\-]*):(\d{1,5})$")


class PolicyViolation(ValueError):
    """Input refers to something the policy does not know, or a policy is unusable."""


class ChainLoopError(PolicyViolation):
    """A function was applied twice to the same request."""


@dataclass(frozen=True)
class TrustAttributes:
    has_valid_cert: bool = False
    is_managed: bool = False
    passed_functions: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.passed_functions)) != len(self.passed_functions):
            raise ChainLoopError(f"duplicate passed functions: {self.passed_functions}")

    def present(self) -> tuple[str, ...]:
        out = []
        if self.has_valid_cert:
            out.append("cert")
        if self.is_managed:
            out.append("managed")
        return tuple(out)


@dataclass(frozen=True)
class TrustScore:
    value: int


@dataclass(frozen=True)
class ChainPlan:
    hops: tuple[tuple[str, str], ...]
    terminal: str | None = None

    @property
    def function_ids(self) -> tuple[str, ...]:
        return tuple(fid for fid, _ in self.hops)


@dataclass(frozen=True)
class Allow:
    plan: ChainPlan


@dataclass(frozen=True)
class Deny:
    reason: str


Decision = Union[Allow, Deny]


@dataclass(frozen=True)
class TrustPolicy:
    threshold: int
    attribute_weights: Mapping[str, int]
    function_uplift: Mapping[str, int]
    compensation: Mapping[str, str]
    function_priority: tuple[str, ...]
    function_registry: Mapping[str, str]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.threshold, int) or self.threshold < 0:
            raise PolicyViolation(f"threshold must be a non-negative integer, got {self.threshold!r}")
        for name, weight in self.attribute_weights.items():
            if name not in ATTRIBUTES:
                raise PolicyViolation(f"unknown attribute {name!r} in weights")
            if not isinstance(weight, int) or weight < 0:
                raise PolicyViolation(f"weight for {name!r} must be a non-negative integer")
        for fid, uplift in self.function_uplift.items():
            if not isinstance(uplift, int) or uplift < 0:
                raise PolicyViolation(f"uplift for {fid!r} must be a non-negative integer")
        for attr, fid in self.compensation.items():
            if attr not in ATTRIBUTES:
                raise PolicyViolation(f"compensation for unknown attribute {attr!r}")
            if fid not in self.function_uplift or fid not in self.function_registry:
                raise PolicyViolation(
                    f"compensation-reference: {attr!r} -> {fid!r} is not a registered function"
                )
        if set(self.function_uplift) != set(self.function_registry):
            raise PolicyViolation("every function needs both an uplift and an address")
        if sorted(self.function_priority) != sorted(self.function_uplift):
            raise PolicyViolation(
                "priority must list every registered function exactly once, "
                f"got {list(self.function_priority)} for {sorted(self.function_uplift)}"
            )
        for fid, addr in self.function_registry.items():
            check_address(addr)
        ceiling = sum(self.attribute_weights.values()) + sum(self.function_uplift.values())
        if self.threshold > ceiling:
            raise PolicyViolation(
                f"threshold-reachability: threshold {self.threshold} exceeds the "
                f"maximum attainable score {ceiling}"
            )

    def rank(self, fid: str) -> int:
        return self.function_priority.index(fid)


def check_address(addr: str) -> str:
    m = _ADDRESS_RE.match(addr)
    if not m or not 0 < int(m.group(2)) < 65536:
        raise PolicyViolation(f"not a host:port address: {addr!r}")
    return addr


def _check_known(attrs: TrustAttributes, policy: TrustPolicy) -> None:
    for fid in attrs.passed_functions:
        if fid not in policy.function_uplift:
            raise PolicyViolation(f"unknown function {fid!r} in passed_functions")


def score(attrs: TrustAttributes, policy: TrustPolicy) -> TrustScore:
    _check_known(attrs, policy)
    value = sum(policy.attribute_weights.get(a, 0) for a in attrs.present())
    value += sum(policy.function_uplift[f] for f in attrs.passed_functions)
    return TrustScore(value)


def select_chain(attrs: TrustAttributes, policy: TrustPolicy, terminal: str | None = None) -> Decision:
    """Decide whether the request may proceed and which functions it must traverse.

    Missing attributes are compensated by their mapped function, ordered by the
    policy priority. Functions already passed are not planned again. When the
    compensating functions fall short, the fewest further functions that close the
    gap are added (largest uplift first), so gaining trust never turns an Allow
    into a Deny.
    """
    current = score(attrs, policy).value
    if current >= policy.threshold:
        return Allow(ChainPlan((), terminal))

    present = set(attrs.present())
    wanted = {
        policy.compensation[a]
        for a in ATTRIBUTES
        if a not in present and a in policy.compensation
    }
    wanted -= set(attrs.passed_functions)
    projected = current + sum(policy.function_uplift[fid] for fid in wanted)
    spare = sorted(
        (f for f in policy.function_uplift if f not in wanted and f not in attrs.passed_functions),
        key=lambda f: (-policy.function_uplift[f], policy.rank(f)),
    )
    for fid in spare:
        if projected >= policy.threshold:
            break
        wanted.add(fid)
        projected += policy.function_uplift[fid]
    if projected < policy.threshold:
        return Deny("insufficient compensable trust")
    hops = tuple((fid, policy.function_registry[fid]) for fid in sorted(wanted, key=policy.rank))
    return Allow(ChainPlan(hops, terminal))


def apply_function_result(attrs: TrustAttributes, fn: str, policy: TrustPolicy) -> TrustAttributes:
    if fn not in policy.function_uplift:
        raise PolicyViolation(f"unknown function {fn!r}")
    if fn in attrs.passed_functions:
        raise ChainLoopError(f"function {fn!r} already applied to this request")
    return replace(attrs, passed_functions=attrs.passed_functions + (fn,))


def load_policy(path: str | Path) -> TrustPolicy:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return policy_from_dict(doc)


def policy_from_dict(doc: Mapping) -> TrustPolicy:
    try:
        section = doc["policy"]
        functions = doc.get("functions", {})
        compensation = {}
        for fid, spec in functions.items():
            target = spec.get("compensates")
            if target is None:
                continue
            if target in compensation:
                raise PolicyViolation(f"attribute {target!r} is compensated twice")
            compensation[target] = fid
        return TrustPolicy(
            threshold=section["threshold"],
            attribute_weights=dict(section.get("weights", {})),
            function_uplift={fid: spec["uplift"] for fid, spec in functions.items()},
            compensation=compensation,
            function_priority=tuple(section.get("priority", sorted(functions))),
            function_registry={fid: spec["address"] for fid, spec in functions.items()},
        )
    except KeyError as exc:
        raise PolicyViolation(f"policy is missing required key {exc}") from None


# ---------------------------------------------------------------------------
# device inventory and attribute derivation


@dataclass(frozen=True)
class Device:
    device_id: str
    secret: bytes
    managed: bool


@dataclass(frozen=True)
class DeviceInventory:
    devices: Mapping[str, Device] = field(default_factory=dict)

    def get(self, device_id: str) -> Device | None:
        return self.devices.get(device_id)


def load_inventory(path: str | Path) -> DeviceInventory:
    """Read ``device_id,secret_hex,managed`` records; ``#`` starts a comment line."""
    devices = {}
    with open(path, newline="") as fh:
        rows = csv.reader(line for line in fh if line.strip() and not line.lstrip().startswith("#"))
        for row in rows:
            if [c.strip() for c in row] == ["device_id", "secret_hex", "managed"]:
                continue
            if len(row) != 3:
                raise ValueError(f"inventory record needs 3 fields: {row!r}")
            device_id, secret_hex, managed = (c.strip() for c in row)
            devices[device_id] = Device(
                device_id, bytes.fromhex(secret_hex), managed.lower() in ("true", "1", "yes")
            )
    return DeviceInventory(devices)


def device_mac(secret: bytes, device_id: str, channel_binding: bytes) -> bytes:
    return hmac.new(secret, device_id.encode() + channel_binding, hashlib.sha256).digest()


def make_device_assertion(device_id: str, secret: bytes, channel_binding: bytes) -> str:
    return f"{device_id}:{device_mac(secret, device_id, channel_binding).hex()}"


@dataclass(frozen=True)
class ConnectionInfo:
    """TLS handshake outcome as seen by the PEP."""

    peer_cert: x509.Certificate | None = None
    channel_binding: bytes = b""


def cert_is_valid(cert: x509.Certificate | None, ca: x509.Certificate, now: dt.datetime | None = None) -> bool:
    if cert is None:
        return False
    now = now or dt.datetime.now(dt.timezone.utc)
    try:
        cert.verify_directly_issued_by(ca)
    except Exception as exc:  # signature, issuer or key-type mismatch
        log.info("client certificate rejected: %s", exc)
        return False
    if not cert.not_valid_before_utc <= now <= cert.not_valid_after_utc:
        log.info("client certificate outside its validity window")
        return False
    return True


def _managed(assertion: str | None, inventory: DeviceInventory, binding: bytes) -> bool:
    if assertion is None:
        return False
    device_id, sep, mac_hex = assertion.strip().rpartition(":")
    if not sep or not device_id:
        log.warning("malformed device assertion")
        return False
    try:
        mac = bytes.fromhex(mac_hex)
    except ValueError:
        log.warning("malformed device assertion MAC for %s", device_id)
        return False
    device = inventory.get(device_id)
    if device is None:
        log.warning("device assertion for unknown device %s", device_id)
        return False
    if not binding:
        log.warning("no channel binding available; ignoring device assertion")
        return False
    if not hmac.compare_digest(mac, device_mac(device.secret, device_id, binding)):
        log.warning("device assertion MAC mismatch for %s", device_id)
        return False
    return device.managed


def derive_attributes(
    conn: ConnectionInfo,
    req_headers: Mapping[str, str] | Sequence[tuple[str, str]],
    inventory: DeviceInventory,
    ca: x509.Certificate,
    now: dt.datetime | None = None,
) -> TrustAttributes:
    if isinstance(req_headers, Mapping):
        items = list(req_headers.items())
    else:
        items = list(req_headers)
    assertion = next(
        (v for k, v in items if k.lower() == DEVICE_ASSERTION_HEADER.lower()), None
    )
    return TrustAttributes(
        has_valid_cert=cert_is_valid(conn.peer_cert, ca, now),
        is_managed=_managed(assertion, inventory, conn.channel_binding),
    )
