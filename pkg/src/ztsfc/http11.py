"""Minimal HTTP/1.1 framing for the proxy hops.

Header lines are kept as the raw bytes received so that a hop forwards
everything it does not deliberately touch byte for byte. Bodies are fully
buffered (Content-Length, chunked, or read-until-close for responses).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

MAX_HEAD = 64 * 1024
MAX_HEADERS = 200


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class Headers:
    """Ordered header lines. Mutators return a new instance."""

    __slots__ = ("_lines",)

    def __init__(self, lines: Iterable[bytes] = ()):
        self._lines = tuple(lines)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> Headers:
        return cls(f"{k}: {v}".encode("latin-1") for k, v in pairs)

    @staticmethod
    def _split(line: bytes) -> tuple[str, str]:
        name, _, value = line.partition(b":")
        return name.decode("latin-1"), value.strip(b" \t").decode("latin-1")

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return (self._split(line) for line in self._lines)

    def __len__(self):
        return len(self._lines)

    def __eq__(self, other):
        return isinstance(other, Headers) and self._lines == other._lines

    def __repr__(self):
        return f"Headers({list(self)!r})"

    @property
    def lines(self) -> tuple[bytes, ...]:
        return self._lines

    def get(self, name: str, default: str | None = None) -> str | None:
        lname = name.lower()
        for k, v in self:
            if k.lower() == lname:
                return v
        return default

    def get_all(self, name: str) -> list[str]:
        lname = name.lower()
        return [v for k, v in self if k.lower() == lname]

    def __contains__(self, name: str) -> bool:
        return self.get(name) is not None

    def without(self, *names: str) -> Headers:
        drop = {n.lower() for n in names}
        return Headers(l for l in self._lines if self._split(l)[0].lower() not in drop)

    def filter(self, keep) -> Headers:
        return Headers(l for l in self._lines if keep(self._split(l)[0]))

    def add(self, name: str, value: str) -> Headers:
        return Headers(self._lines + (f"{name}: {value}".encode("latin-1"),))

    def set(self, name: str, value: str) -> Headers:
        """Replace the first ``name`` line in place (dropping repeats), or append."""
        lname = name.lower()
        out, done = [], False
        for line in self._lines:
            if self._split(line)[0].lower() == lname:
                if not done:
                    out.append(f"{name}: {value}".encode("latin-1"))
                    done = True
                continue
            out.append(line)
        if not done:
            out.append(f"{name}: {value}".encode("latin-1"))
        return Headers(out)

    def to_bytes(self) -> bytes:
        return b"".join(l + b"\r\n" for l in self._lines)


def _is_chunked(headers: Headers) -> bool:
    te = ",".join(headers.get_all("Transfer-Encoding")).lower()
    return "chunked" in te


def _frame_body(headers: Headers, body: bytes) -> bytes:
    if _is_chunked(headers):
        return (b"%x\r\n" % len(body) + body + b"\r\n" if body else b"") + b"0\r\n\r\n"
    return body


@dataclass(frozen=True)
class Request:
    method: str
    target: str
    headers: Headers = field(default_factory=Headers)
    body: bytes = b""
    version: str = "HTTP/1.1"

    def head_bytes(self) -> bytes:
        return f"{self.method} {self.target} {self.version}\r\n".encode("latin-1") + self.headers.to_bytes() + b"\r\n"

    def to_bytes(self) -> bytes:
        return self.head_bytes() + _frame_body(self.headers, self.body)

    def with_headers(self, headers: Headers) -> Request:
        return replace(self, headers=headers)

    def wants_close(self) -> bool:
        conn = (self.headers.get("Connection") or "").lower()
        if self.version == "HTTP/1.0":
            return "keep-alive" not in conn
        return "close" in conn


@dataclass(frozen=True)
class Response:
    status: int
    reason: str = ""
    headers: Headers = field(default_factory=Headers)
    body: bytes = b""
    version: str = "HTTP/1.1"

    def head_bytes(self) -> bytes:
        return f"{self.version} {self.status} {self.reason}\r\n".encode("latin-1") + self.headers.to_bytes() + b"\r\n"

    def to_bytes(self, head_only: bool = False) -> bytes:
        if head_only:
            return self.head_bytes()
        return self.head_bytes() + _frame_body(self.headers, self.body)

    def with_headers(self, headers: Headers) -> Response:
        return replace(self, headers=headers)


_REASONS = {
    200: "OK", 400: "Bad Request", 401: "Unauthorized", 403: "Forbidden", 404: "Not Found",
    413: "Payload Too Large", 500: "Internal Server Error", 502: "Bad Gateway",
    504: "Gateway Timeout",
}


def simple_response(status: int, body: bytes = b"", headers: Iterable[tuple[str, str]] = (),
                    content_type: str = "text/plain", close: bool = True) -> Response:
    pairs = list(headers)
    if body:
        pairs.append(("Content-Type", content_type))
    pairs.append(("Content-Length", str(len(body))))
    if close:
        pairs.append(("Connection", "close"))
    return Response(status, _REASONS.get(status, ""), Headers.from_pairs(pairs), body)


def with_content_length(resp: Response) -> Response:
    if _is_chunked(resp.headers) or "Content-Length" in resp.headers:
        return resp
    return resp.with_headers(resp.headers.add("Content-Length", str(len(resp.body))))


class Stream:
    """Buffered reader/writer over anything with ``recv`` and ``sendall``."""

    def __init__(self, sock, bufsize: int = 65536):
        self.sock = sock
        self._buf = bytearray()
        self._bufsize = bufsize

    def _fill(self) -> bool:
        chunk = self.sock.recv(self._bufsize)
        if not chunk:
            return False
        self._buf += chunk
        return True

    def readline(self, limit: int = MAX_HEAD) -> bytes:
        while True:
            i = self._buf.find(b"\n")
            if i >= 0:
                line = bytes(self._buf[:i + 1])
                del self._buf[:i + 1]
                return line
            if len(self._buf) > limit:
                raise HttpError(400, "line too long")
            if not self._fill():
                line = bytes(self._buf)
                self._buf.clear()
                return line

    def read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            if not self._fill():
                raise HttpError(400, "connection closed mid-body")
        data = bytes(self._buf[:n])
        del self._buf[:n]
        return data

    def read_all(self, limit: int) -> bytes:
        while self._fill():
            if len(self._buf) > limit:
                raise HttpError(413, "body too large")
        data = bytes(self._buf)
        self._buf.clear()
        return data

    def sendall(self, data: bytes) -> None:
        self.sock.sendall(data)


def _read_head(stream: Stream) -> tuple[bytes, list[bytes]] | None:
    start = stream.readline()
    while start in (b"\r\n", b"\n"):  # tolerate stray CRLF between messages
        start = stream.readline()
    if not start:
        return None
    if not start.endswith(b"\n"):
        raise HttpError(400, "truncated start line")
    lines, total = [], len(start)
    while True:
        line = stream.readline()
        total += len(line)
        if total > MAX_HEAD or len(lines) > MAX_HEADERS:
            raise HttpError(400, "header section too large")
        if not line.endswith(b"\n"):
            raise HttpError(400, "truncated header section")
        if line in (b"\r\n", b"\n"):
            break
        line = line.rstrip(b"\r\n")
        if line[:1] in (b" ", b"\t") or b":" not in line:
            raise HttpError(400, "malformed header line")
        lines.append(line)
    return start.rstrip(b"\r\n"), lines


def _read_chunked(stream: Stream, limit: int) -> bytes:
    body = bytearray()
    while True:
        size_line = stream.readline(1024).split(b";", 1)[0].strip()
        try:
            size = int(size_line, 16)
        except ValueError:
            raise HttpError(400, "bad chunk size") from None
        if size == 0:
            break
        if len(body) + size > limit:
            raise HttpError(413, "body too large")
        body += stream.read_exact(size)
        stream.read_exact(2)
    while stream.readline() not in (b"\r\n", b"\n", b""):
        pass  # trailers are discarded
    return bytes(body)


def _content_length(headers: Headers) -> int | None:
    values = headers.get_all("Content-Length")
    if not values:
        return None
    if len(set(values)) != 1 or not values[0].isdigit():
        raise HttpError(400, "invalid Content-Length")
    return int(values[0])


def read_request(stream: Stream, max_body: int = 16 * 1024 * 1024) -> Request | None:
    head = _read_head(stream)
    if head is None:
        return None
    start, lines = head
    parts = start.decode("latin-1").split(" ")
    if len(parts) != 3 or not parts[2].startswith("HTTP/1."):
        raise HttpError(400, "malformed request line")
    method, target, version = parts
    headers = Headers(lines)
    if _is_chunked(headers):
        body = _read_chunked(stream, max_body)
    else:
        length = _content_length(headers) or 0
        if length > max_body:
            raise HttpError(413, "body too large")
        body = stream.read_exact(length) if length else b""
    return Request(method, target, headers, body, version)


def read_response(stream: Stream, request_method: str = "GET",
                  max_body: int = 64 * 1024 * 1024) -> Response:
    head = _read_head(stream)
    if head is None:
        raise HttpError(502, "upstream closed without a response")
    start, lines = head
    parts = start.decode("latin-1").split(" ", 2)
    if len(parts) < 2 or not parts[0].startswith("HTTP/1.") or not parts[1].isdigit():
        raise HttpError(502, "malformed status line")
    version, status = parts[0], int(parts[1])
    reason = parts[2] if len(parts) > 2 else ""
    headers = Headers(lines)
    if request_method == "HEAD" or status in (204, 304) or 100 <= status < 200:
        body = b""
    elif _is_chunked(headers):
        body = _read_chunked(stream, max_body)
    else:
        length = _content_length(headers)
        body = stream.read_all(max_body) if length is None else stream.read_exact(length)
    return Response(status, reason, headers, body, version)


class _BytesSource:
    def __init__(self, data: bytes):
        self._data = memoryview(data)

    def recv(self, n: int) -> bytes:
        chunk, self._data = bytes(self._data[:n]), self._data[n:]
        return chunk


def parse_request_bytes(data: bytes) -> Request:
    req = read_request(Stream(_BytesSource(data)), max_body=len(data))
    if req is None:
        raise HttpError(400, "empty message")
    return req
