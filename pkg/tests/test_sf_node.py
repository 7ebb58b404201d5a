from __future__ import annotations

import json
import socket
import ssl

import pytest

from conftest import Recorder
from ztsfc import tls
from ztsfc.chain_codec import (
    CHAIN_HEADER, ORIGIN_HEADER, POT_HEADER, REQUEST_ID_HEADER, SEALED_CHAIN_HEADER, digest_of,
    open_pot_token, parse_pot_header, seal_chain,
)
from ztsfc.http11 import Headers, Request, Stream, read_response
from ztsfc.security_functions import MfaSecretStore, build_function
from ztsfc.sf_node import FunctionConfig, FunctionNode, load_private_key, parse_request_id, send_feedback

RID = "00112233445566778899aabbccddeeff"


def dead_address():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    addr = "127.0.0.1:%d" % s.getsockname()[1]
    s.close()
    return addr


@pytest.fixture(scope="module")
def pep_mgmt(pki_dir):
    rec = Recorder(tls.Identity.in_dir(pki_dir, "pep"))
    yield rec
    rec.stop()


@pytest.fixture(scope="module")
def service(pki_dir):
    rec = Recorder(tls.Identity.in_dir(pki_dir, "service"))
    yield rec
    rec.stop()


def make_node(pki_dir, mgmt, fid="IPS", behavior="ips", pot=True, listen="127.0.0.1:0"):
    cfg = FunctionConfig(
        function_id=fid,
        listen=listen,
        pep_mgmt=mgmt,
        identity=tls.Identity.in_dir(pki_dir, fid.lower()),
        pep_cert=pki_dir / "pep.crt",
        function=build_function(fid, behavior),
        pot=pot,
        connect_timeout=2.0,
        request_timeout=5.0,
        feedback_timeout=2.0,
    )
    return FunctionNode(cfg)


@pytest.fixture
def node(pki_dir, pep_mgmt):
    n = make_node(pki_dir, pep_mgmt.address)
    yield n
    n.server.server_close()


def hop_request(chain_pairs, body=b"hello", target="/data"):
    pairs = [("Host", "svc.example"), (REQUEST_ID_HEADER, RID), *chain_pairs,
             ("X-Custom", "  spaced   value"), ("Content-Length", str(len(body)))]
    return Request("POST", target, Headers.from_pairs(pairs), body)


def test_benign_forwarded_byte_for_byte(pki_dir, node, service):
    before = len(service.requests)
    req = hop_request([(CHAIN_HEADER, service.address)])
    resp = node.process_hop(req)
    assert resp.status == 200
    peer, received = service.requests[before]
    assert peer == "IPS"
    assert CHAIN_HEADER not in received.headers
    kept = tuple(l for l in req.headers.lines if not l.lower().startswith(CHAIN_HEADER.lower().encode()))
    assert received.headers.lines[:-1] == kept
    assert received.headers.lines[-1].startswith(POT_HEADER.encode() + b": ")
    assert received.body == req.body

    (token_text,) = parse_pot_header(received.headers.get(POT_HEADER))
    token = open_pot_token(token_text, load_private_key(pki_dir / "pep.key"))
    assert token.function_id == "IPS"
    assert token.request_id == bytes.fromhex(RID)
    assert token.request_digest == digest_of(req)


def test_multi_hop_chain_keeps_remaining_entries(node, service):
    before = len(service.requests)
    # the remaining entry points back at the service so only one hop is exercised
    node.process_hop(hop_request([(CHAIN_HEADER, f"{service.address},10.0.0.1:1")]))
    _, received = service.requests[before]
    assert received.headers.get(CHAIN_HEADER) == "10.0.0.1:1"


def test_pot_appended_to_existing(node, service):
    before = len(service.requests)
    node.process_hop(hop_request([(CHAIN_HEADER, service.address), (POT_HEADER, "earlier")]))
    _, received = service.requests[before]
    tokens = parse_pot_header(received.headers.get(POT_HEADER))
    assert len(tokens) == 2 and tokens[0] == "earlier"


def test_pot_disabled(pki_dir, pep_mgmt, service):
    n = make_node(pki_dir, pep_mgmt.address, pot=False)
    before = len(service.requests)
    n.process_hop(hop_request([(CHAIN_HEADER, service.address)]))
    _, received = service.requests[before]
    assert POT_HEADER not in received.headers
    n.server.server_close()


def test_sealed_entry_opened_with_own_key(pki_dir, node, service):
    keys = {"IPS": tls.load_cert(pki_dir / "ips.crt").public_key()}
    sealed = seal_chain([("IPS", service.address)], keys)
    before = len(service.requests)
    assert node.process_hop(hop_request([(SEALED_CHAIN_HEADER, sealed.render())])).status == 200
    _, received = service.requests[before]
    assert SEALED_CHAIN_HEADER not in received.headers


def test_malicious_request_dropped_with_feedback(node, pep_mgmt, service):
    before_fb, before_svc = len(pep_mgmt.requests), len(service.requests)
    resp = node.process_hop(hop_request([(CHAIN_HEADER, service.address)], body=b"id=1' OR '1'='1"))
    assert resp.status == 403
    assert resp.headers.get(ORIGIN_HEADER) == "IPS"
    assert len(service.requests) == before_svc
    peer, fb = pep_mgmt.requests[before_fb]
    assert peer == "IPS" and fb.target == "/sfc/feedback"
    assert json.loads(fb.body) == {
        "request_id": RID, "function_id": "IPS", "verdict": "Dropped", "reason": "sqli-tautology",
    }


@pytest.mark.parametrize("chain_pairs", [
    [],
    [(CHAIN_HEADER, "")],
    [(CHAIN_HEADER, "not-an-address")],
    [(CHAIN_HEADER, "a:1"), (CHAIN_HEADER, "b:2")],
    [(CHAIN_HEADER, "a:1"), (SEALED_CHAIN_HEADER, "AAAA")],
    [(SEALED_CHAIN_HEADER, "AAAA")],
])
def test_chain_protocol_violations(node, pep_mgmt, chain_pairs):
    before = len(pep_mgmt.requests)
    resp = node.process_hop(hop_request(chain_pairs))
    assert resp.status == 403
    assert json.loads(pep_mgmt.requests[before][1].body)["reason"] == "chain-protocol"


def test_sealed_entry_for_other_function_dropped(pki_dir, node, pep_mgmt, service):
    keys = {"MFA": tls.load_cert(pki_dir / "mfa.crt").public_key()}
    sealed = seal_chain([("MFA", service.address)], keys)
    before = len(pep_mgmt.requests)
    assert node.process_hop(hop_request([(SEALED_CHAIN_HEADER, sealed.render())])).status == 403
    assert json.loads(pep_mgmt.requests[before][1].body)["reason"] == "chain-protocol"


def test_missing_request_id_is_chain_protocol(node, pep_mgmt, service):
    req = Request("GET", "/", Headers.from_pairs([("Host", "x"), (CHAIN_HEADER, service.address)]))
    before = len(pep_mgmt.requests)
    assert node.process_hop(req).status == 403
    assert json.loads(pep_mgmt.requests[before][1].body)["request_id"] == ""


def test_next_hop_unreachable_gives_502_without_feedback(node, pep_mgmt):
    before = len(pep_mgmt.requests)
    resp = node.process_hop(hop_request([(CHAIN_HEADER, dead_address())]))
    assert resp.status == 502
    assert resp.headers.get(ORIGIN_HEADER) == "IPS"
    assert len(pep_mgmt.requests) == before


def test_pep_down_still_403(pki_dir, service):
    n = make_node(pki_dir, dead_address())
    resp = n.process_hop(hop_request([(CHAIN_HEADER, service.address)], body=b"<script>"))
    assert resp.status == 403
    n.server.server_close()


def test_send_feedback_retries_once(pki_dir):
    # a PEP that accepts the connection but never answers
    rec = Recorder(tls.Identity.in_dir(pki_dir, "pep"), respond=lambda req: None)
    try:
        ctx = tls.client_context(tls.Identity.in_dir(pki_dir, "ips"))
        assert not send_feedback(rec.address, {"request_id": RID}, ctx, timeout=1.0)
        assert len(rec.requests) == 2
    finally:
        rec.stop()


def test_mfa_challenge_relayed(pki_dir, pep_mgmt, service):
    cfg = FunctionConfig("MFA", "127.0.0.1:0", pep_mgmt.address, tls.Identity.in_dir(pki_dir, "mfa"),
                         pki_dir / "pep.crt", build_function("MFA", "mfa", mfa_store=MfaSecretStore({})))
    n = FunctionNode(cfg)
    resp = n.process_hop(hop_request([(CHAIN_HEADER, service.address)]))
    assert resp.status == 401
    assert resp.headers.get("WWW-Authenticate") == "ZTSFC-MFA"
    assert resp.headers.get(ORIGIN_HEADER) == "MFA"
    n.server.server_close()


def test_node_refuses_mismatched_certificate(pki_dir, pep_mgmt):
    cfg = FunctionConfig("MFA", "127.0.0.1:0", pep_mgmt.address, tls.Identity.in_dir(pki_dir, "ips"),
                         pki_dir / "pep.crt", build_function("MFA", "pass"))
    with pytest.raises(ValueError, match="expected 'MFA'"):
        FunctionNode(cfg)


def test_parse_request_id():
    assert parse_request_id(RID) == bytes.fromhex(RID)
    assert parse_request_id(None) is None
    assert parse_request_id("zz" * 16) is None
    assert parse_request_id("00") is None


# --- over the wire -------------------------------------------------------------------

def wire(pki_dir, address, identity, req):
    ctx = tls.client_context(tls.Identity.in_dir(pki_dir, identity))
    sock = tls.connect_mtls(address, ctx, 5)
    try:
        sock.sendall(req.to_bytes())
        return read_response(Stream(sock), req.method)
    finally:
        sock.close()


def test_local_endpoints_and_wire_hop(pki_dir, pep_mgmt, service):
    n = make_node(pki_dir, pep_mgmt.address)
    n.start()
    try:
        health = wire(pki_dir, n.address, "harness",
                      Request("GET", "/.sfc/health", Headers.from_pairs([("Host", "x")])))
        assert json.loads(health.body) == {"status": "ok", "function_id": "IPS"}
        resp = wire(pki_dir, n.address, "pep", hop_request([(CHAIN_HEADER, service.address)]))
        assert resp.status == 200
        stats = wire(pki_dir, n.address, "harness",
                     Request("GET", "/.sfc/stats", Headers.from_pairs([("Host", "x")])))
        assert json.loads(stats.body)["invocations"] == 1
    finally:
        n.stop()


def test_node_rejects_client_ca_certificate(pki_dir, pep_mgmt):
    n = make_node(pki_dir, pep_mgmt.address)
    n.start()
    try:
        ctx = ssl.create_default_context(cafile=str(pki_dir / "enterprise-ca.crt"))
        ctx.load_cert_chain(pki_dir / "client-managed.crt", pki_dir / "client-managed.key")
        with pytest.raises((ssl.SSLError, ConnectionError, OSError)):
            sock = tls.connect_mtls(n.address, ctx, 5)
            sock.sendall(b"GET /.sfc/health HTTP/1.1\r\nHost: x\r\n\r\n")
            if not sock.recv(1):
                raise ConnectionError("closed without response")
    finally:
        n.stop()
