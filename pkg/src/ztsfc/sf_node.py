"""Service-function node: verdict, pop next hop, append PoT, forward over mTLS."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec

from . import tls
from .chain_codec import (
    CHAIN_HEADER, ORIGIN_HEADER, POT_HEADER, REQUEST_ID_HEADER, SEALED_CHAIN_HEADER,
    ChainHeaderValue, ChainProtocolError, Mode, digest_of, make_pot_token, open_entry,
    pop_next_hop,
)
from .http11 import (
    Headers, HttpError, Request, Response, Stream, read_request, read_response, simple_response,
)
from .sealing import SealError
from .security_functions import Challenge, Drop, ServiceFunction

log = logging.getLogger(__name__)

MAX_BODY = 8 * 1024 * 1024
LOCAL_PATHS = ("/.sfc/health", "/.sfc/stats")


@dataclass
class FunctionConfig:
    function_id: str
    listen: str
    pep_mgmt: str
    identity: tls.Identity
    pep_cert: Path
    function: ServiceFunction
    delay_ms: int = 0
    pot: bool = True
    connect_timeout: float = 10.0
    request_timeout: float = 30.0
    feedback_timeout: float = 3.0


def load_private_key(path: str | Path) -> ec.EllipticCurvePrivateKey:
    return serialization.load_pem_private_key(Path(path).read_bytes(), password=None)


def parse_request_id(value: str | None) -> bytes | None:
    if value is None or len(value) != 32:
        return None
    try:
        return bytes.fromhex(value)
    except ValueError:
        return None


def post_json(address: str, path: str, payload: dict, ctx, timeout: float) -> Response:
    body = json.dumps(payload).encode()
    headers = Headers.from_pairs([
        ("Host", address), ("Content-Type", "application/json"),
        ("Content-Length", str(len(body))), ("Connection", "close"),
    ])
    req = Request("POST", path, headers, body)
    sock = tls.connect_mtls(address, ctx, timeout)
    try:
        sock.settimeout(timeout)
        sock.sendall(req.to_bytes())
        return read_response(Stream(sock), "POST")
    finally:
        sock.close()


def send_feedback(pep_mgmt: str, event: dict, ctx, timeout: float = 3.0) -> bool:
    """Deliver a drop event to the PEP; one retry, then give up and log."""
    for attempt in (1, 2):
        try:
            resp = post_json(pep_mgmt, "/sfc/feedback", event, ctx, timeout)
            if resp.status == 200:
                return True
            log.warning("feedback rejected by PEP with %s (attempt %d)", resp.status, attempt)
        except (OSError, HttpError) as exc:
            log.warning("feedback delivery failed (attempt %d): %s", attempt, exc)
    log.error("feedback lost: %s", json.dumps(event))
    return False


class FunctionNode:
    def __init__(self, config: FunctionConfig):
        self.config = config
        cert = tls.load_cert(config.identity.cert)
        if tls.common_name(cert) != config.function_id:
            raise ValueError(
                f"certificate names {tls.common_name(cert)!r}, expected {config.function_id!r}"
            )
        self.private_key = load_private_key(config.identity.key)
        self.pep_public_key = tls.load_cert(config.pep_cert).public_key()
        self.client_ctx = tls.client_context(config.identity)
        self.server = tls.TLSServer(
            config.listen, tls.stdlib_acceptor(tls.server_context(config.identity)), self.handle
        )

    @property
    def function_id(self) -> str:
        return self.config.function_id

    @property
    def address(self) -> str:
        return self.server.address

    def start(self):
        return self.server.start()

    def stop(self):
        self.server.stop()

    def serve_forever(self):
        self.server.serve_forever(poll_interval=0.2)

    # --- connection handling --------------------------------------------

    def handle(self, peer: tls.PeerConnection) -> None:
        try:
            req = read_request(peer.stream, MAX_BODY)
        except HttpError as exc:
            peer.stream.sendall(simple_response(exc.status, str(exc).encode()).to_bytes())
            return
        except OSError:
            return
        if req is None:
            return
        if req.target in LOCAL_PATHS and REQUEST_ID_HEADER not in req.headers:
            resp = self._local(req)
        else:
            resp = self.process_hop(req)
        peer.stream.sendall(resp.to_bytes(head_only=req.method == "HEAD"))

    def _local(self, req: Request) -> Response:
        if req.target == "/.sfc/health":
            payload = {"status": "ok", "function_id": self.function_id}
        else:
            payload = self.config.function.snapshot()
        return simple_response(200, json.dumps(payload).encode(), content_type="application/json")

    def _reply(self, status: int, reason: str = "", headers=()) -> Response:
        return simple_response(status, reason.encode(), [(ORIGIN_HEADER, self.function_id), *headers])

    def _drop(self, request_id: str | None, reason: str) -> Response:
        event = {
            "request_id": request_id or "",
            "function_id": self.function_id,
            "verdict": "Dropped",
            "reason": reason,
        }
        log.info("dropping request %s: %s", request_id, reason)
        send_feedback(self.config.pep_mgmt, event, self.client_ctx, self.config.feedback_timeout)
        return self._reply(403, "Forbidden\n")

    def _pop(self, req: Request) -> tuple[str, ChainHeaderValue | None, str]:
        sealed = req.headers.get_all(SEALED_CHAIN_HEADER)
        plain = req.headers.get_all(CHAIN_HEADER)
        if len(sealed) + len(plain) != 1:
            raise ChainProtocolError("expected exactly one chain header")
        if sealed:
            entry, rest = pop_next_hop(ChainHeaderValue.parse(sealed[0], Mode.SEALED))
            return open_entry(entry, self.private_key), rest, SEALED_CHAIN_HEADER
        nxt, rest = pop_next_hop(ChainHeaderValue.parse(plain[0], Mode.PLAIN))
        return nxt, rest, CHAIN_HEADER

    def process_hop(self, req: Request) -> Response:
        rid_text = req.headers.get(REQUEST_ID_HEADER)
        rid = parse_request_id(rid_text)
        try:
            if rid is None:
                raise ChainProtocolError("missing or malformed request id")
            next_hop, remaining, header = self._pop(req)
        except (ChainProtocolError, SealError) as exc:
            log.info("chain protocol violation: %s", exc)
            return self._drop(rid_text, "chain-protocol")

        if self.config.delay_ms:
            time.sleep(self.config.delay_ms / 1000)
        verdict = self.config.function(req)
        if isinstance(verdict, Drop):
            return self._drop(rid_text, verdict.reason)
        if isinstance(verdict, Challenge):
            return simple_response(
                verdict.status, verdict.body, [(ORIGIN_HEADER, self.function_id), *verdict.headers]
            )

        forwarded = self.forwarded_request(req, rid, remaining, header)
        try:
            return self._forward(next_hop, forwarded)
        except (OSError, HttpError) as exc:
            log.warning("next hop %s unreachable: %s", next_hop, exc)
            return self._reply(502, "Bad Gateway\n")

    def forwarded_request(self, req: Request, rid: bytes, remaining: ChainHeaderValue | None,
                          header: str) -> Request:
        headers = req.headers
        headers = headers.set(header, remaining.render()) if remaining else headers.without(header)
        if self.config.pot:
            token = make_pot_token(rid, self.function_id, digest_of(req), self.pep_public_key)
            existing = ",".join(req.headers.get_all(POT_HEADER))
            headers = headers.set(POT_HEADER, f"{existing},{token.ciphertext}" if existing else token.ciphertext)
        return req.with_headers(headers)

    def _forward(self, address: str, req: Request) -> Response:
        sock = tls.connect_mtls(address, self.client_ctx, self.config.connect_timeout)
        try:
            sock.settimeout(self.config.request_timeout)
            sock.sendall(req.to_bytes())
            return read_response(Stream(sock), req.method)
        finally:
            try:
                sock.close()
            except OSError:
                pass
