"""Echo service standing in for the protected resource.

The response body is the request exactly as received (``message/http``), so
the harness can compare it with what the client sent. ``X-SFC-PoT`` is echoed
into the response for the PEP. ``X-Echo-Fault`` lets the harness corrupt the
echoed tokens (``pot-flip``, ``pot-drop``, ``pot-dup``) to exercise the PEP's
proof-of-transit check.
"""

from __future__ import annotations

import json
import logging
import threading

from . import tls
from .chain_codec import POT_HEADER, parse_pot_header
from .http11 import HttpError, read_request, simple_response
from .sealing import b64decode, b64encode

log = logging.getLogger(__name__)

FAULT_HEADER = "X-Echo-Fault"


def _flip(token: str) -> str:
    raw = bytearray(b64decode(token))
    raw[len(raw) // 2] ^= 0xFF
    return b64encode(bytes(raw))


def apply_fault(tokens: list[str], fault: str | None) -> list[str]:
    if not fault or not tokens:
        return tokens
    if fault == "pot-flip":
        return [_flip(tokens[0]), *tokens[1:]]
    if fault == "pot-drop":
        return tokens[:-1]
    if fault == "pot-dup":
        return [*tokens, tokens[0]]
    return tokens


class EchoService:
    def __init__(self, listen: str, identity: tls.Identity):
        self.server = tls.TLSServer(listen, tls.stdlib_acceptor(tls.server_context(identity)), self.handle)
        self._lock = threading.Lock()
        self.invocations = 0

    @property
    def address(self) -> str:
        return self.server.address

    def start(self):
        return self.server.start()

    def stop(self):
        self.server.stop()

    def serve_forever(self):
        self.server.serve_forever(poll_interval=0.2)

    def handle(self, peer: tls.PeerConnection) -> None:
        try:
            req = read_request(peer.stream)
        except HttpError as exc:
            peer.stream.sendall(simple_response(exc.status).to_bytes())
            return
        except OSError:
            return
        if req is None:
            return
        if req.target == "/.sfc/health":
            peer.stream.sendall(simple_response(200, b'{"status": "ok"}', content_type="application/json").to_bytes())
            return
        if req.target == "/.sfc/stats":
            with self._lock:
                body = json.dumps({"function_id": "service", "invocations": self.invocations}).encode()
            peer.stream.sendall(simple_response(200, body, content_type="application/json").to_bytes())
            return
        with self._lock:
            self.invocations += 1
        tokens = apply_fault(parse_pot_header(",".join(req.headers.get_all(POT_HEADER))),
                             req.headers.get(FAULT_HEADER))
        extra = [(POT_HEADER, ",".join(tokens))] if tokens else []
        resp = simple_response(200, req.to_bytes(), extra, content_type="message/http")
        peer.stream.sendall(resp.to_bytes(head_only=req.method == "HEAD"))
