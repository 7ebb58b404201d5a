"""Policy enforcement point acting as the chain classifier.

Request pipeline: derive attributes -> select chain -> inject chain headers ->
mTLS to the first hop -> verify proof of transit -> relay. Drop feedback from
functions arrives on a separate mutual-TLS management listener.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

from cryptography.hazmat.primitives.asymmetric import ec

from . import tls
from .chain_codec import (
    ORIGIN_HEADER, POT_HEADER, REQUEST_ID_HEADER, Fail, Mode, SealingConfigError, digest_of,
    encode_chain, new_request_id, parse_pot_header, seal_chain, strip_internal_headers, verify_pot,
)
from .http11 import (
    HttpError, Request, Response, Stream, read_request, read_response, simple_response,
    with_content_length,
)
from .sf_node import load_private_key
from .trust_policy import (
    Allow, ChainPlan, ConnectionInfo, Decision, DeviceInventory, TrustAttributes, TrustPolicy,
    derive_attributes, select_chain,
)

log = logging.getLogger(__name__)
history_log = logging.getLogger("ztsfc.history")

SERVED = "Served"
DENIED = "Denied"
DROPPED = "DroppedByFunction"
POT_FAILURE = "PotFailure"
UPSTREAM_ERROR = "UpstreamError"
MAX_BODY = 16 * 1024 * 1024


@dataclass
class PepConfig:
    listen: str
    mgmt_listen: str
    service: str
    identity: tls.Identity
    client_ca: Path
    policy: TrustPolicy
    inventory: DeviceInventory
    function_certs: Mapping[str, Path]
    history_path: Path
    feedback_path: Path
    seal: bool = True
    pot: bool = True
    connect_timeout: float = 10.0
    request_timeout: float = 30.0


@dataclass(frozen=True)
class FeedbackEvent:
    request_id: str
    function_id: str
    verdict: str
    reason: str
    received_at: float


@dataclass
class RequestContext:
    request_id: bytes
    attrs: TrustAttributes
    decision: Decision
    issued_digest: bytes
    started_at: float
    upstream: socket.socket | None = None
    feedback: FeedbackEvent | None = None


class JsonLinesSink:
    """Append-only newline-delimited JSON file with serialized writes."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def read_jsonl(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(l) for l in p.read_text().splitlines() if l.strip()]


def build_upstream_request(request: Request, plan: ChainPlan, mode: Mode | None,
                           request_id: bytes, keys: Mapping[str, ec.EllipticCurvePublicKey] | None = None,
                           ) -> tuple[str, Request]:
    """Target address and the request to send there.

    Hop ``i`` of the plan reads chain entry ``i``, which holds the address of
    hop ``i + 1`` (or the service for the last hop).
    """
    if not plan.hops:
        return plan.terminal, request
    following = [addr for _, addr in plan.hops[1:]] + [plan.terminal]
    if mode is Mode.SEALED:
        value = seal_chain(list(zip(plan.function_ids, following)), keys or {})
    else:
        value = encode_chain(following)
    headers = request.headers.add(REQUEST_ID_HEADER, request_id.hex()).add(value.header, value.render())
    return plan.hops[0][1], request.with_headers(headers)


def _generic(status: int) -> Response:
    return simple_response(status, {403: b"Forbidden\n", 500: b"Internal Server Error\n",
                                     502: b"Bad Gateway\n"}.get(status, b""), close=False)


class Pep:
    def __init__(self, config: PepConfig):
        self.config = config
        self._snapshot = (config.policy, config.inventory)
        self.client_ca = tls.load_cert(config.client_ca)
        self.private_key = load_private_key(config.identity.key)
        self.sealing_keys = {}
        for fid, path in config.function_certs.items():
            cert = tls.load_cert(path)
            if tls.common_name(cert) != fid:
                raise ValueError(f"certificate {path} does not name function {fid!r}")
            self.sealing_keys[fid] = cert.public_key()
        self.registered = frozenset(config.function_certs)
        self.upstream_ctx = tls.client_context(config.identity)
        self.history = JsonLinesSink(config.history_path)
        self.feedback_log = JsonLinesSink(config.feedback_path)
        self._inflight: dict[bytes, RequestContext] = {}
        self._lock = threading.Lock()
        data_ctx = tls.data_plane_server_context(config.identity.cert, config.identity.key, config.client_ca)
        self.data_server = tls.TLSServer(config.listen, tls.openssl_acceptor(data_ctx), self.handle_client)
        self.mgmt_server = tls.TLSServer(
            config.mgmt_listen, tls.stdlib_acceptor(tls.server_context(config.identity)), self.handle_mgmt
        )

    # --- lifecycle ------------------------------------------------------

    def start(self) -> None:
        self.mgmt_server.start()
        self.data_server.start()

    def stop(self) -> None:
        self.data_server.stop()
        self.mgmt_server.stop()
        self.history.close()
        self.feedback_log.close()

    def reload(self, policy: TrustPolicy | None = None, inventory: DeviceInventory | None = None) -> None:
        current = self._snapshot
        self._snapshot = (policy or current[0], inventory or current[1])

    @property
    def mode(self) -> Mode:
        return Mode.SEALED if self.config.seal else Mode.PLAIN

    def inflight_count(self) -> int:
        with self._lock:
            return len(self._inflight)

    # --- data plane -----------------------------------------------------

    def handle_client(self, peer: tls.PeerConnection) -> None:
        conn = ConnectionInfo(peer.peer_cert, peer.channel_binding)
        while True:
            try:
                req = read_request(peer.stream, MAX_BODY)
            except HttpError as exc:
                peer.stream.sendall(simple_response(exc.status, b"").to_bytes())
                return
            except OSError:
                return
            if req is None:
                return
            resp = with_content_length(self.handle_request(req, conn))
            close = req.wants_close()
            headers = resp.headers.without("Connection")
            if close:
                headers = headers.add("Connection", "close")
            peer.stream.sendall(resp.with_headers(headers).to_bytes(head_only=req.method == "HEAD"))
            if close:
                return

    def handle_request(self, req: Request, conn: ConnectionInfo) -> Response:
        started = time.monotonic()
        policy, inventory = self._snapshot
        rid = new_request_id()
        attrs = derive_attributes(conn, list(req.headers), inventory, self.client_ca)
        decision = select_chain(attrs, policy, terminal=self.config.service)
        client = (tls.common_name(conn.peer_cert) or "unnamed") if attrs.has_valid_cert else "anonymous"

        def finish(outcome: str, status: int, path=(), reason: str = "") -> None:
            self._record(rid, client, path, outcome, status, started, reason)

        if not isinstance(decision, Allow):
            log.info("request %s denied: %s", rid.hex(), decision.reason)
            finish(DENIED, 403, reason=decision.reason)
            return _generic(403)

        plan = decision.plan
        clean = strip_internal_headers(req)
        try:
            target, outgoing = build_upstream_request(clean, plan, self.mode, rid, self.sealing_keys)
        except SealingConfigError as exc:
            log.error("cannot seal chain: %s", exc)
            finish(UPSTREAM_ERROR, 500, reason=str(exc))
            return _generic(500)

        ctx = RequestContext(rid, attrs, decision, digest_of(clean), started)
        with self._lock:
            self._inflight[rid] = ctx
        resp, error = None, None
        try:
            resp = self._exchange(target, outgoing, ctx)
        except (OSError, HttpError) as exc:
            error = exc
        finally:
            with self._lock:
                self._inflight.pop(rid, None)

        hop_ids = plan.function_ids
        if ctx.feedback is not None:
            finish(DROPPED, 403, _path_until(hop_ids, ctx.feedback.function_id), ctx.feedback.reason)
            return _generic(403)
        if resp is None:
            log.warning("upstream %s failed for %s: %s", target, rid.hex(), error)
            finish(UPSTREAM_ERROR, 502, reason=str(error))
            return _generic(502)

        origin = resp.headers.get(ORIGIN_HEADER)
        if origin is not None and hop_ids:
            path = _path_until(hop_ids, origin)
            if resp.status == 403:
                finish(DROPPED, 403, path, "drop without feedback")
                return _generic(403)
            if resp.status == 401:
                finish(DENIED, 401, path, f"challenge from {origin}")
                return strip_internal_headers(resp)
            finish(UPSTREAM_ERROR, 502, path, f"{origin} answered {resp.status}")
            return _generic(502)

        if hop_ids and self.config.pot:
            tokens = parse_pot_header(",".join(resp.headers.get_all(POT_HEADER)))
            result = verify_pot(tokens, plan, rid, ctx.issued_digest, self.private_key)
            if isinstance(result, Fail):
                log.warning("proof of transit failed for %s: %s", rid.hex(), result.reason)
                finish(POT_FAILURE, 502, hop_ids, result.reason)
                return _generic(502)

        finish(SERVED, resp.status, hop_ids)
        return strip_internal_headers(resp)

    def _exchange(self, target: str, outgoing: Request, ctx: RequestContext) -> Response:
        remaining = ctx.started_at + self.config.request_timeout - time.monotonic()
        sock = tls.connect_mtls(target, self.upstream_ctx, max(0.1, min(self.config.connect_timeout, remaining)))
        try:
            with self._lock:
                ctx.upstream = sock
                terminated = ctx.feedback is not None
            if terminated:
                raise OSError("terminated by feedback")
            sock.settimeout(max(0.1, ctx.started_at + self.config.request_timeout - time.monotonic()))
            sock.sendall(outgoing.to_bytes())
            return read_response(Stream(sock), outgoing.method)
        finally:
            with self._lock:
                ctx.upstream = None
            try:
                sock.close()
            except OSError:
                pass

    def _record(self, rid: bytes, client: str, path, outcome: str, status: int,
                started: float, reason: str = "") -> None:
        record = {
            "request_id": rid.hex(),
            "client": client,
            "path": list(path),
            "outcome": outcome,
            "status": status,
            "latency_ms": round((time.monotonic() - started) * 1000, 3),
            "ts": time.time(),
        }
        self.history.append(record)
        history_log.info(json.dumps(record, sort_keys=True))
        if reason:
            log.debug("request %s reason: %s", rid.hex(), reason)

    # --- management plane -----------------------------------------------

    def handle_feedback(self, event: FeedbackEvent) -> dict:
        """Persist ``event``; terminate the matching in-flight request once."""
        rid = bytes.fromhex(event.request_id) if _is_hex_id(event.request_id) else None
        with self._lock:
            ctx = self._inflight.get(rid) if rid else None
            terminate = ctx is not None and ctx.feedback is None
            if terminate:
                ctx.feedback = event
                upstream = ctx.upstream
            else:
                upstream = None
        record = asdict(event)
        if ctx is None:
            record["diagnostic"] = "unknown-request"
        elif not terminate:
            record["diagnostic"] = "duplicate"
        self.feedback_log.append(record)
        if upstream is not None:
            try:
                socket.socket.shutdown(upstream, socket.SHUT_RDWR)
            except OSError:
                pass
        return {"ack": True, "terminated": terminate}

    def handle_mgmt(self, peer: tls.PeerConnection) -> None:
        try:
            req = read_request(peer.stream, 64 * 1024)
        except (HttpError, OSError):
            return
        if req is None:
            return
        if req.method == "GET" and req.target == "/sfc/health":
            body = json.dumps({"status": "ok", "inflight": self.inflight_count()}).encode()
            peer.stream.sendall(simple_response(200, body, content_type="application/json").to_bytes())
            return
        if req.method != "POST" or req.target != "/sfc/feedback":
            peer.stream.sendall(simple_response(404).to_bytes())
            return
        if peer.peer_name not in self.registered:
            log.warning("feedback from unregistered peer %r rejected", peer.peer_name)
            return
        try:
            doc = json.loads(req.body)
            event = FeedbackEvent(
                request_id=str(doc["request_id"]),
                function_id=str(doc["function_id"]),
                verdict=str(doc["verdict"]),
                reason=str(doc.get("reason", ""))[:200],
                received_at=time.time(),
            )
        except (ValueError, KeyError, TypeError):
            peer.stream.sendall(simple_response(400).to_bytes())
            return
        if event.function_id != peer.peer_name or event.verdict != "Dropped":
            peer.stream.sendall(simple_response(403).to_bytes())
            return
        ack = self.handle_feedback(event)
        peer.stream.sendall(simple_response(200, json.dumps(ack).encode(),
                                            content_type="application/json").to_bytes())


def _is_hex_id(value: str) -> bool:
    return len(value) == 32 and all(c in "0123456789abcdefABCDEF" for c in value)


def _path_until(hops: tuple[str, ...], fid: str) -> tuple[str, ...]:
    return hops[:hops.index(fid) + 1] if fid in hops else hops
