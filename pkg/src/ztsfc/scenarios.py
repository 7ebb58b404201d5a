"""Scenario suite and soak test against a running testbed."""

from __future__ import annotations

import json
import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from cryptography.hazmat.primitives.asymmetric import ec

from . import tls
from .chain_codec import open_entry, seal_chain, strip_internal_headers
from .echo import FAULT_HEADER
from .http11 import Headers, Request, Response, Stream, parse_request_bytes, read_response
from .pki import MANAGED_DEVICE
from .sealing import SealError
from .security_functions import load_mfa_store, totp
from .sf_node import load_private_key
from .topology import Topology
from .trust_policy import DEVICE_ASSERTION_HEADER, load_inventory, make_device_assertion

# (has client certificate, is managed) -> expected path under the fixture policy
ROUTES = {
    "green": ((True, True), ()),
    "blue": ((True, False), ("IPS",)),
    "orange": ((False, True), ("MFA",)),
    "red": ((False, False), ("MFA", "IPS")),
}
MFA_USER = "alice"


@dataclass
class Exchange:
    sent: Request
    response: Response
    latency_ms: float

    def echoed(self) -> Request:
        return parse_request_bytes(self.response.body)


class HarnessClient:
    """Data-plane client with selectable identity material."""

    def __init__(self, topology: Topology):
        cfg = topology.config
        self.address = cfg.pep_listen
        ca = cfg.pki_dir / "enterprise-ca.crt"
        self._contexts = {
            ("cert", True): tls.data_plane_client_context(
                ca, cfg.pki_dir / "client-managed.crt", cfg.pki_dir / "client-managed.key"),
            ("cert", False): tls.data_plane_client_context(
                ca, cfg.pki_dir / "client-unmanaged.crt", cfg.pki_dir / "client-unmanaged.key"),
            ("none", None): tls.data_plane_client_context(ca),
        }
        self.device_secret = load_inventory(cfg.inventory_path).get(MANAGED_DEVICE).secret
        self.mfa_secret = None
        if cfg.mfa_store_path and cfg.mfa_store_path.exists():
            self.mfa_secret = load_mfa_store(cfg.mfa_store_path).secrets.get(MFA_USER)

    def _context(self, cert: bool, managed: bool):
        return self._contexts[("cert", managed)] if cert else self._contexts[("none", None)]

    def build(self, method: str = "GET", target: str = "/", body: bytes = b"",
              extra: list[tuple[str, str]] = ()) -> Request:
        pairs = [("Host", self.address), ("User-Agent", "ztsfc-harness/1"), *extra]
        if body or method in ("POST", "PUT"):
            pairs.append(("Content-Length", str(len(body))))
        pairs.append(("Connection", "close"))
        return Request(method, target, Headers.from_pairs(pairs), body)

    def send(self, cert: bool, managed: bool, request: Request, mfa: str | None = "valid",
             timeout: float = 30.0) -> Exchange:
        """Send ``request`` with the given identity.

        ``mfa`` is ``"valid"`` (current code), ``"wrong"`` or ``None`` (no headers).
        """
        start = time.perf_counter()
        stream = tls.connect_data_plane(self.address, self._context(cert, managed), timeout)
        try:
            headers = request.headers
            if managed:
                assertion = make_device_assertion(MANAGED_DEVICE, self.device_secret, stream.channel_binding())
                headers = headers.add(DEVICE_ASSERTION_HEADER, assertion)
            if mfa and self.mfa_secret is not None:
                code = totp(self.mfa_secret, time.time())
                if mfa == "wrong":
                    code = f"{(int(code) + 500000) % 1000000:06d}"
                headers = headers.add("X-MFA-User", MFA_USER).add("X-MFA-Code", code)
            sent = request.with_headers(headers)
            stream.sendall(sent.to_bytes())
            resp = read_response(Stream(stream), sent.method)
        finally:
            stream.close()
        return Exchange(sent, resp, (time.perf_counter() - start) * 1000)


def transparent(exchange: Exchange) -> bool:
    """The service saw the client's request minus internal headers, byte for byte."""
    try:
        received = exchange.echoed()
    except Exception:
        return False
    return strip_internal_headers(received).to_bytes() == strip_internal_headers(exchange.sent).to_bytes()


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    expected: object = None
    observed: object = None
    path: list = field(default_factory=list)
    status: int | None = None
    latency_ms: float | None = None
    invocations: dict = field(default_factory=dict)
    detail: str = ""


@dataclass
class ScenarioReport:
    results: list[ScenarioResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "summary": f"{sum(r.passed for r in self.results)}/{len(self.results)} scenarios passed",
            "scenarios": [asdict(r) for r in self.results],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _delta(before: dict, after: dict) -> dict:
    return {k: after[k] - before.get(k, 0) for k in after}


def _single_request(topology: Topology, client: HarnessClient, cert: bool, managed: bool,
                    request: Request, mfa: str | None = "valid"):
    before_inv = topology.invocations()
    n_hist = len(topology.history())
    ex = client.send(cert, managed, request, mfa)
    new = topology.history()[n_hist:]
    inv = _delta(before_inv, topology.invocations())
    return ex, (new[-1] if new else None), inv


def scenario_route(topology, client, name) -> ScenarioResult:
    (cert, managed), expected = ROUTES[name]
    req = client.build("POST", f"/resource/{name}", f"route {name}".encode(),
                       [("Content-Type", "text/plain")])
    ex, record, inv = _single_request(topology, client, cert, managed, req)
    path = tuple(record["path"]) if record else None
    functions_hit = tuple(sorted(f for f in topology.config.functions if inv.get(f)))
    ok = (
        ex.response.status == 200
        and path == expected
        and functions_hit == tuple(sorted(expected))
        and all(inv.get(f) == 1 for f in expected)
        and record["outcome"] == "Served"
        and transparent(ex)
    )
    return ScenarioResult(f"route-{name}", ok, list(expected), list(path or ()), list(path or ()),
                          ex.response.status, round(ex.latency_ms, 2), inv)


def scenario_ips_drop(topology, client) -> ScenarioResult:
    req = client.build("POST", "/login", b"id=1' OR '1'='1",
                       [("Content-Type", "application/x-www-form-urlencoded")])
    ex, record, inv = _single_request(topology, client, True, False, req)
    events = [e for e in topology.feedback() if record and e["request_id"] == record["request_id"]]
    ok = (
        ex.response.status == 403
        and record is not None and record["outcome"] == "DroppedByFunction"
        and any(e["function_id"] == "IPS" for e in events)
        and inv.get("service") == 0
    )
    return ScenarioResult("ips-drop", ok, "403 + IPS feedback",
                          {"status": ex.response.status, "feedback": len(events)},
                          record["path"] if record else [], ex.response.status,
                          round(ex.latency_ms, 2), inv)


def scenario_mfa_fail(topology, client) -> ScenarioResult:
    req = client.build("GET", "/resource/mfa")
    ex, record, inv = _single_request(topology, client, False, True, req, mfa="wrong")
    events = [e for e in topology.feedback() if record and e["request_id"] == record["request_id"]]
    ok = (
        ex.response.status == 403
        and record is not None and record["outcome"] == "DroppedByFunction"
        and any(e["function_id"] == "MFA" and e["reason"] == "mfa-failed" for e in events)
        and inv.get("service") == 0
    )
    return ScenarioResult("mfa-fail", ok, "403 + feedback mfa-failed",
                          {"status": ex.response.status, "reasons": [e["reason"] for e in events]},
                          record["path"] if record else [], ex.response.status,
                          round(ex.latency_ms, 2), inv)


def scenario_mfa_challenge(topology, client) -> ScenarioResult:
    req = client.build("GET", "/resource/mfa")
    ex, record, inv = _single_request(topology, client, False, True, req, mfa=None)
    www = ex.response.headers.get("WWW-Authenticate")
    ok = ex.response.status == 401 and www == "ZTSFC-MFA" and inv.get("service") == 0
    return ScenarioResult("mfa-challenge", ok, "401 ZTSFC-MFA", {"status": ex.response.status, "www": www},
                          record["path"] if record else [], ex.response.status,
                          round(ex.latency_ms, 2), inv)


def scenario_pot_tamper(topology, client) -> list[ScenarioResult]:
    out = []
    if not topology.config.pot:
        return [ScenarioResult("pot-tamper", True, detail="skipped: proof of transit disabled")]
    for fault in ("pot-flip", "pot-drop", "pot-dup"):
        req = client.build("GET", "/resource/tamper", extra=[(FAULT_HEADER, fault)])
        ex, record, inv = _single_request(topology, client, True, False, req)
        ok = ex.response.status == 502 and record is not None and record["outcome"] == "PotFailure"
        out.append(ScenarioResult(f"pot-tamper-{fault}", ok, "502 PotFailure",
                                  record["outcome"] if record else None,
                                  record["path"] if record else [], ex.response.status,
                                  round(ex.latency_ms, 2), inv))
    return out


def direct_connection_rejected(address: str, ctx) -> tuple[bool, str]:
    """Try to talk HTTP straight to an internal component; True if TLS refuses."""
    try:
        stream = tls.connect_data_plane(address, ctx, timeout=5.0)
    except Exception as exc:
        return True, f"handshake: {exc}"
    try:
        stream.sendall(b"GET /.sfc/health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        data = stream.recv(4096)
    except Exception as exc:
        return True, f"rejected after client finished: {exc}"
    finally:
        stream.close()
    return not data.startswith(b"HTTP/"), f"received {data[:40]!r}"


def scenario_direct(topology, client) -> ScenarioResult:
    cfg = topology.config
    policy = cfg.policy()
    targets = {fid: policy.function_registry[fid] for fid in cfg.functions}
    targets["service"] = cfg.service
    observed = {}
    for ident, (cert, managed) in {"client-cert": (True, True), "no-cert": (False, False)}.items():
        for name, addr in targets.items():
            rejected, detail = direct_connection_rejected(addr, client._context(cert, managed))
            observed[f"{ident}->{name}"] = rejected
    ok = all(observed.values())
    return ScenarioResult("direct-to-internal-rejected", ok, "all rejected", observed,
                          detail=f"{sum(observed.values())}/{len(observed)} rejected")


def scenario_sealed(topology) -> ScenarioResult:
    cfg = topology.config
    policy = cfg.policy()
    if not cfg.seal:
        return ScenarioResult("sealed-chain-confidentiality", True, detail="skipped: sealing disabled")
    hops = [(fid, policy.function_registry[fid]) for fid in policy.function_priority]
    following = [addr for _, addr in hops[1:]] + [cfg.service]
    readers = [fid for fid, _ in hops]
    keys = {fid: tls.load_cert(cfg.pki_dir / f"{fid.lower()}.crt").public_key() for fid in readers}
    value = seal_chain(list(zip(readers, following)), keys)
    holders = readers + ["pep", "service"]
    matrix = {}
    for i, entry in enumerate(value.entries):
        for holder in holders:
            key: ec.EllipticCurvePrivateKey = load_private_key(cfg.pki_dir / f"{holder.lower()}.key")
            try:
                opened = open_entry(entry, key) == following[i]
            except SealError:
                opened = False
            matrix[f"entry{i}:{holder}"] = opened
    ok = all(matrix[f"entry{i}:{h}"] == (h == readers[i]) for i in range(len(readers)) for h in holders)
    return ScenarioResult("sealed-chain-confidentiality", ok, "only designated reader opens", matrix)


def scenario_latency(topology, client, requests: int = 50) -> ScenarioResult:
    delay = topology.config.functions.get("IPS").delay_ms if "IPS" in topology.config.functions else 0
    margin = 0.8 * delay

    def timings(name: str) -> list[float]:
        (cert, managed), _ = ROUTES[name]
        return [client.send(cert, managed, client.build("GET", "/latency")).latency_ms
                for _ in range(requests)]

    before = topology.invocations()
    lat = {"green": timings("green")}
    green_ips = _delta(before, topology.invocations()).get("IPS", 0)
    lat["blue"] = timings("blue")
    med = {k: statistics.median(v) for k, v in lat.items()}
    gap = med["blue"] - med["green"]
    ok = gap >= margin and green_ips == 0
    return ScenarioResult(
        "latency-green-vs-blue", ok, f"blue - green >= {margin:.1f} ms and 0 IPS calls on green",
        {"median_green_ms": round(med["green"], 2), "median_blue_ms": round(med["blue"], 2),
         "gap_ms": round(gap, 2), "green_ips_invocations": green_ips},
        detail=f"{requests} requests per path, injected IPS delay {delay} ms",
    )


def run_scenarios(topology: Topology, latency_requests: int = 50) -> ScenarioReport:
    client = HarnessClient(topology)
    results = [scenario_route(topology, client, name) for name in ROUTES]
    results.append(scenario_ips_drop(topology, client))
    results.append(scenario_mfa_fail(topology, client))
    results.append(scenario_mfa_challenge(topology, client))
    results.extend(scenario_pot_tamper(topology, client))
    results.append(scenario_direct(topology, client))
    results.append(scenario_sealed(topology))
    results.append(scenario_latency(topology, client, latency_requests))
    return ScenarioReport(results)


# --- soak ---------------------------------------------------------------------

@dataclass
class SoakReport:
    concurrency: int
    ok: int
    failures: list[str]
    history_records: int
    duration_s: float

    @property
    def passed(self) -> bool:
        return not self.failures and self.ok == self.concurrency and self.history_records == self.concurrency

    def to_dict(self) -> dict:
        return dict(asdict(self), passed=self.passed)


def run_soak(topology: Topology, concurrency: int = 100) -> SoakReport:
    """Fire ``concurrency`` mixed green/blue requests at once and check isolation."""
    client = HarnessClient(topology)
    n_hist = len(topology.history())
    barrier = threading.Barrier(concurrency)
    failures: list[str] = []

    def one(i: int) -> bool:
        name = "green" if i % 2 == 0 else "blue"
        (cert, managed), _ = ROUTES[name]
        body = f"soak {i} ".encode() + os.urandom(64).hex().encode()
        req = client.build("POST", f"/soak/{i}", body, [("X-Soak-Id", str(i))])
        barrier.wait(timeout=60)
        try:
            ex = client.send(cert, managed, req)
        except Exception as exc:
            failures.append(f"{i}: {exc}")
            return False
        if ex.response.status != 200:
            failures.append(f"{i}: status {ex.response.status}")
            return False
        echoed = ex.echoed()
        if echoed.body != body or echoed.headers.get("X-Soak-Id") != str(i) or not transparent(ex):
            failures.append(f"{i}: response does not match its request")
            return False
        return True

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        ok = sum(pool.map(one, range(concurrency)))
    duration = time.perf_counter() - start
    new = topology.history()[n_hist:]
    ids = {r["request_id"] for r in new}
    if len(ids) != len(new):
        failures.append("duplicate request ids in history")
    if any(r["outcome"] != "Served" for r in new):
        failures.append("non-Served history records")
    return SoakReport(concurrency, ok, failures, len(new), round(duration, 3))
