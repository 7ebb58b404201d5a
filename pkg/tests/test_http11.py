from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ztsfc.http11 import (
    Headers, HttpError, Request, Stream, _BytesSource, parse_request_bytes, read_request, read_response,
    simple_response, with_content_length,
)


def stream(data: bytes) -> Stream:
    return Stream(_BytesSource(data))


def test_raw_header_lines_preserved():
    raw = b"POST /x?a=1 HTTP/1.1\r\nHost: h\r\nX-Odd:   spaced\t\r\nContent-Length: 3\r\n\r\nabc"
    req = parse_request_bytes(raw)
    assert req.to_bytes() == raw
    assert req.headers.get("x-odd") == "spaced"


def test_chunked_request_dechunked():
    raw = (b"POST / HTTP/1.1\r\nHost: h\r\nTransfer-Encoding: chunked\r\n\r\n"
           b"3;ext=1\r\nabc\r\n2\r\nde\r\n0\r\nTrailer: x\r\n\r\n")
    req = parse_request_bytes(raw)
    assert req.body == b"abcde"
    assert req.to_bytes().endswith(b"\r\n\r\n5\r\nabcde\r\n0\r\n\r\n")
    assert parse_request_bytes(req.to_bytes()) == req


@pytest.mark.parametrize("raw", [
    b"GET /\r\n\r\n",
    b"GET / HTTP/1.1\r\nNoColon\r\n\r\n",
    b"GET / HTTP/1.1\r\n folded: x\r\n\r\n",
    b"POST / HTTP/1.1\r\nContent-Length: 1\r\nContent-Length: 2\r\n\r\nab",
    b"POST / HTTP/1.1\r\nContent-Length: -1\r\n\r\n",
    b"POST / HTTP/1.1\r\nTransfer-Encoding: chunked\r\n\r\nzz\r\n",
    b"POST / HTTP/1.1\r\nContent-Length: 10\r\n\r\nshort",
    b"GET / HTTP/1.1\r\nHost: h\r\n",
])
def test_malformed_requests(raw):
    with pytest.raises(HttpError):
        parse_request_bytes(raw)


def test_body_limit():
    raw = b"POST / HTTP/1.1\r\nContent-Length: 100\r\n\r\n" + b"a" * 100
    with pytest.raises(HttpError) as exc:
        read_request(stream(raw), max_body=10)
    assert exc.value.status == 413


def test_response_read_until_close():
    resp = read_response(stream(b"HTTP/1.1 200 OK\r\nX: y\r\n\r\nall the rest"))
    assert resp.status == 200 and resp.body == b"all the rest"


def test_response_head_has_no_body():
    resp = read_response(stream(b"HTTP/1.1 200 OK\r\nContent-Length: 5\r\n\r\n"), "HEAD")
    assert resp.body == b""


def test_response_errors():
    with pytest.raises(HttpError, match="without a response"):
        read_response(stream(b""))
    with pytest.raises(HttpError, match="status line"):
        read_response(stream(b"SMTP ready\r\n\r\n"))


def test_headers_set_and_without():
    h = Headers.from_pairs([("A", "1"), ("B", "2"), ("a", "3")])
    assert list(h.set("a", "x")) == [("a", "x"), ("B", "2")]
    assert list(h.set("C", "4"))[-1] == ("C", "4")
    assert list(h.without("A")) == [("B", "2")]
    assert h.get_all("A") == ["1", "3"]
    assert "b" in h and "c" not in h


def test_simple_response_and_content_length():
    r = simple_response(403, b"no", close=False)
    assert r.headers.get("Content-Length") == "2" and "Connection" not in r.headers
    assert r.to_bytes().startswith(b"HTTP/1.1 403 Forbidden\r\n")
    bare = read_response(stream(b"HTTP/1.1 200 OK\r\n\r\nxyz"))
    assert with_content_length(bare).headers.get("Content-Length") == "3"


def test_wants_close():
    assert Request("GET", "/", Headers.from_pairs([("Connection", "close")])).wants_close()
    assert not Request("GET", "/").wants_close()
    assert Request("GET", "/", version="HTTP/1.0").wants_close()


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=512), st.lists(st.tuples(
    st.from_regex(r"\A[A-Za-z][A-Za-z0-9-]{0,15}\Z", fullmatch=True),
    st.from_regex(r"\A[ -~]{0,30}\Z", fullmatch=True).map(str.strip)), max_size=8))
def test_roundtrip(body, pairs):
    pairs = [(k, v) for k, v in pairs if k.lower() not in ("content-length", "transfer-encoding")]
    req = Request("PUT", "/p", Headers.from_pairs(pairs + [("Content-Length", str(len(body)))]), body)
    assert parse_request_bytes(req.to_bytes()) == req
