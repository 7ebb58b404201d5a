from __future__ import annotations

import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ztsfc.chain_codec import (
    CHAIN_HEADER,
    POT_HEADER,
    SEALED_CHAIN_HEADER,
    ChainHeaderValue,
    ChainProtocolError,
    EncodingError,
    Fail,
    Mode,
    Ok,
    SealingConfigError,
    SealedEntry,
    encode_chain,
    is_internal,
    make_pot_token,
    open_entry,
    open_pot_token,
    parse_pot_header,
    pop_next_hop,
    request_digest,
    seal_chain,
    strip_internal_headers,
    verify_pot,
)
from ztsfc.http11 import Headers, Request, Response
from ztsfc.sealing import SealError, b64decode, b64encode, open_sealed, seal
from ztsfc.trust_policy import ChainPlan


def pub(keypairs, name):
    return keypairs[name].public_key()


# --- plain chain ---------------------------------------------------------------

def test_encode_examples():
    assert encode_chain(["203.0.113.20:9000"]).render() == "203.0.113.20:9000"
    assert encode_chain(["203.0.113.10:9001", "203.0.113.20:9000"]).render() == \
        "203.0.113.10:9001,203.0.113.20:9000"
    assert encode_chain([]) is None


@pytest.mark.parametrize("bad", ["a:1,b:2", "a :1", "a:1\r\n", "a:\t1", "no-port", "h:99999"])
def test_encode_rejects_delimiters(bad):
    with pytest.raises(EncodingError):
        encode_chain([bad])


def test_pop_examples():
    head, rest = pop_next_hop("A:1,B:2")
    assert head == "A:1" and rest.render() == "B:2"
    head, rest = pop_next_hop("B:2")
    assert head == "B:2" and rest is None
    with pytest.raises(ChainProtocolError):
        pop_next_hop("")


@pytest.mark.parametrize("bad", ["   ", ",", "A:1,,B:2", "garbage"])
def test_pop_malformed(bad):
    with pytest.raises(ChainProtocolError):
        pop_next_hop(bad)


def test_mode_headers():
    assert Mode.PLAIN.header == CHAIN_HEADER
    assert Mode.SEALED.header == SEALED_CHAIN_HEADER


hosts = st.from_regex(r"\A[a-z][a-z0-9.-]{0,20}\Z", fullmatch=True)
addresses = st.builds(lambda h, p: f"{h}:{p}", hosts, st.integers(1, 65535))


@settings(max_examples=200, deadline=None)
@given(st.lists(addresses, min_size=1, max_size=16))
def test_parse_render_roundtrip(hops):
    value = encode_chain(hops)
    assert ChainHeaderValue.parse(value.render()) == value


# --- sealing ---------------------------------------------------------------------

def test_seal_primitive_roundtrip_and_wrong_info(keypairs):
    blob = seal(pub(keypairs, "IPS"), b"hello", b"ctx")
    assert open_sealed(keypairs["IPS"], blob, b"ctx") == b"hello"
    with pytest.raises(SealError):
        open_sealed(keypairs["IPS"], blob, b"other")
    with pytest.raises(SealError):
        open_sealed(keypairs["MFA"], blob, b"ctx")
    with pytest.raises(SealError):
        open_sealed(keypairs["IPS"], blob[:20], b"ctx")


def test_b64_strict():
    assert b64decode(b64encode(b"\xff\x00abc")) == b"\xff\x00abc"
    for bad in ("a+b", "a/b", "ab==", "a b"):
        with pytest.raises(ValueError):
            b64decode(bad)


def test_sealed_chain_open_by_reader(keypairs):
    keys = {f: pub(keypairs, f) for f in ("IPS", "MFA")}
    value = seal_chain([("MFA", "10.0.0.2:9102"), ("IPS", "10.0.0.9:9000")], keys)
    assert value.mode is Mode.SEALED and value.header == SEALED_CHAIN_HEADER
    parsed = ChainHeaderValue.parse(value.render(), Mode.SEALED)
    first, rest = pop_next_hop(parsed)
    assert open_entry(first, keypairs["MFA"]) == "10.0.0.2:9102"
    second, rest = pop_next_hop(rest)
    assert rest is None
    assert open_entry(SealedEntry("IPS", second), keypairs["IPS"]) == "10.0.0.9:9000"
    with pytest.raises(SealError):
        open_entry(first, keypairs["IPS"])


def test_seal_missing_key(keypairs):
    with pytest.raises(SealingConfigError):
        seal_chain([("IPS", "a:1"), ("MFA", "b:2")], {"IPS": pub(keypairs, "IPS")})


def test_seal_nothing():
    with pytest.raises(EncodingError):
        seal_chain([], {})


def test_sealed_entries_are_randomized(keypairs):
    keys = {"IPS": pub(keypairs, "IPS")}
    a = seal_chain([("IPS", "a:1")], keys).render()
    b = seal_chain([("IPS", "a:1")], keys).render()
    assert a != b


def test_open_entry_rejects_non_address(keypairs):
    blob = b64encode(seal(pub(keypairs, "IPS"), b"not an address", b"ztsfc-hop/1"))
    with pytest.raises(SealError):
        open_entry(blob, keypairs["IPS"])


# --- proof of transit ------------------------------------------------------------

RID = bytes(range(16))
DIGEST = request_digest("POST", "/x", b"body")


def test_pot_roundtrip(keypairs):
    tok = make_pot_token(RID, "IPS", DIGEST, pub(keypairs, "pep"), now=1_700_000_000)
    opened = open_pot_token(tok.ciphertext, keypairs["pep"])
    assert (opened.request_id, opened.function_id, opened.request_digest, opened.issued_at) == \
        (RID, "IPS", DIGEST, 1_700_000_000)


def test_pot_randomized(keypairs):
    a = make_pot_token(RID, "IPS", DIGEST, pub(keypairs, "pep"), now=1)
    b = make_pot_token(RID, "IPS", DIGEST, pub(keypairs, "pep"), now=1)
    assert a.ciphertext != b.ciphertext


def test_pot_flipped_byte_fails(keypairs):
    tok = make_pot_token(RID, "IPS", DIGEST, pub(keypairs, "pep"))
    raw = bytearray(b64decode(tok.ciphertext))
    raw[-1] ^= 0x80
    assert verify_pot([b64encode(bytes(raw))], ["IPS"], RID, DIGEST, keypairs["pep"]) == Fail("changed")


def test_pot_input_validation(keypairs):
    with pytest.raises(ValueError):
        make_pot_token(b"short", "IPS", DIGEST, pub(keypairs, "pep"))


def tokens_for(keypairs, fids, rid=RID, digest=DIGEST):
    return [make_pot_token(rid, f, digest, pub(keypairs, "pep")).ciphertext for f in fids]


def test_verify_pot_examples(keypairs):
    plan = ChainPlan((("MFA", "a:1"), ("IPS", "b:2")), "s:3")
    toks = tokens_for(keypairs, ["MFA", "IPS"])
    assert verify_pot(toks, plan, RID, DIGEST, keypairs["pep"]) == Ok()
    assert verify_pot(list(reversed(toks)), plan, RID, DIGEST, keypairs["pep"]) == Ok()
    assert verify_pot(toks[:1], plan, RID, DIGEST, keypairs["pep"]) == Fail("absent")
    other = request_digest("POST", "/x", b"BODY")
    assert verify_pot(toks, plan, RID, other, keypairs["pep"]) == Fail("changed")
    extra = tokens_for(keypairs, ["WAF"])
    assert verify_pot(toks + extra, plan, RID, DIGEST, keypairs["pep"]) == Fail("unexpected token")
    assert verify_pot(toks + toks[:1], plan, RID, DIGEST, keypairs["pep"]) == Fail("unexpected token")
    foreign = tokens_for(keypairs, ["IPS"], rid=b"\x01" * 16)
    assert verify_pot(toks[:1] + foreign, plan, RID, DIGEST, keypairs["pep"]) == Fail("unexpected token")


def test_verify_pot_wrong_pep_key(keypairs):
    toks = tokens_for(keypairs, ["IPS"])
    assert verify_pot(toks, ["IPS"], RID, DIGEST, keypairs["X"]) == Fail("changed")


def test_verify_empty_plan():
    assert verify_pot([], [], RID, DIGEST, None) == Ok()


def test_parse_pot_header():
    assert parse_pot_header(None) == []
    assert parse_pot_header("") == []
    assert parse_pot_header(" a , b,,c ") == ["a", "b", "c"]


def test_request_digest_separates_fields():
    assert request_digest("GET", "/a", b"") != request_digest("GET", "/a", b"x")
    assert request_digest("GET", "/ab", b"") != request_digest("GETa", "/b", b"")
    assert request_digest("GET", "/a", b"") == request_digest("GET", "/a", b"")


# --- internal header stripping -----------------------------------------------------

def _req(pairs, body=b"payload"):
    return Request("POST", "/r", Headers.from_pairs(pairs), body)


def test_strip_examples():
    req = _req([("Host", "svc"), (CHAIN_HEADER, "a:1")])
    assert strip_internal_headers(req) == _req([("Host", "svc")])

    plain = _req([("Host", "svc"), ("Accept", "*/*")])
    assert strip_internal_headers(plain) == plain

    full = _req([("Host", "svc"), (CHAIN_HEADER, "a:1"), (POT_HEADER, "tok"),
                 ("X-Device-Assertion", "d:00"), ("X-Other", "1")])
    stripped = strip_internal_headers(full)
    assert stripped.to_bytes() == _req([("Host", "svc"), ("X-Other", "1")]).to_bytes()
    assert stripped.body == full.body


def test_strip_response_and_case_insensitive():
    resp = Response(200, "OK", Headers.from_pairs([("x-sfc-pot", "t"), ("X-SFC-Origin", "IPS"), ("A", "b")]))
    assert list(strip_internal_headers(resp).headers) == [("A", "b")]


header_names = st.sampled_from(["Host", "Accept", "X-SFC-Chain", "x-sfc-pot", "X-Device-Assertion",
                                "X-SFC-Request-ID", "X-Custom", "x-sfcish"])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(header_names, st.text("abc123", max_size=5)), max_size=10), st.binary(max_size=64))
def test_strip_idempotent_and_complete(pairs, body):
    once = strip_internal_headers(_req(pairs, body))
    assert strip_internal_headers(once) == once
    assert not any(is_internal(k) for k, _ in once.headers)
    assert once.body == body
    assert [p for p in pairs if not is_internal(p[0])] == list(once.headers)


def test_is_internal():
    assert is_internal("X-SFC-Anything")
    assert is_internal("x-device-assertion")
    assert not is_internal("X-SFCish")
    assert not is_internal("Host")


def test_pot_issued_at_defaults_to_now(keypairs):
    before = int(time.time())
    tok = make_pot_token(RID, "IPS", DIGEST, pub(keypairs, "pep"))
    assert before <= open_pot_token(tok.ciphertext, keypairs["pep"]).issued_at <= int(time.time())
