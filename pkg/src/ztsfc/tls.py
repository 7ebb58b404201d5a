"""TLS plumbing shared by the PEP, function nodes, the echo service and the harness.

Internal hops use the stdlib ``ssl`` module with mandatory client certificates.
The public PEP listener uses pyOpenSSL: it must request a client certificate
without failing the handshake when the certificate is missing or invalid, and
it needs the RFC 9266 ``tls-exporter`` channel binding, neither of which the
stdlib exposes.
"""

from __future__ import annotations

import ipaddress
import logging
import select
import socket
import socketserver
import ssl
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from cryptography import x509
from cryptography.x509.oid import NameOID
from OpenSSL import SSL

from .http11 import Stream
from .trust_policy import CHANNEL_BINDING_LABEL, CHANNEL_BINDING_LENGTH

log = logging.getLogger(__name__)


class TransportError(OSError):
    pass


@dataclass(frozen=True)
class Identity:
    cert: Path
    key: Path
    ca: Path

    @classmethod
    def in_dir(cls, pki_dir: str | Path, name: str, ca: str = "enterprise-ca") -> Identity:
        d = Path(pki_dir)
        return cls(d / f"{name}.crt", d / f"{name}.key", d / f"{ca}.crt")


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host.strip("[]"), int(port)


def load_cert(path: str | Path) -> x509.Certificate:
    return x509.load_pem_x509_certificate(Path(path).read_bytes())


def common_name(cert: x509.Certificate | None) -> str | None:
    if cert is None:
        return None
    attrs = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    return attrs[0].value if attrs else None


def server_context(identity: Identity) -> ssl.SSLContext:
    """Mutual-TLS server: peers must present a certificate from ``identity.ca``."""
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_cert_chain(identity.cert, identity.key)
    ctx.load_verify_locations(identity.ca)
    ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def client_context(identity: Identity) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_verify_locations(identity.ca)
    ctx.load_cert_chain(identity.cert, identity.key)
    return ctx


def connect_mtls(address: str, ctx: ssl.SSLContext, timeout: float) -> ssl.SSLSocket:
    host, port = split_address(address)
    try:
        raw = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"connect {address}: {exc}") from exc
    try:
        return ctx.wrap_socket(raw, server_hostname=host)
    except (ssl.SSLError, OSError) as exc:
        raw.close()
        raise TransportError(f"handshake with {address}: {exc}") from exc


def peer_certificate(sock: ssl.SSLSocket) -> x509.Certificate | None:
    der = sock.getpeercert(binary_form=True)
    return x509.load_der_x509_certificate(der) if der else None


# --- pyOpenSSL adapter -------------------------------------------------------

class OpenSSLStream:
    """Socket-like facade over a non-blocking pyOpenSSL connection."""

    def __init__(self, conn: SSL.Connection, sock: socket.socket, timeout: float | None):
        self.conn = conn
        self.sock = sock
        self.timeout = timeout

    def _wait(self, readable: bool) -> None:
        r, w = ([self.sock], []) if readable else ([], [self.sock])
        if not select.select(r, w, [], self.timeout)[0 if readable else 1]:
            raise socket.timeout("TLS operation timed out")

    def _retry(self, fn, *args):
        while True:
            try:
                return fn(*args)
            except SSL.WantReadError:
                self._wait(True)
            except SSL.WantWriteError:
                self._wait(False)

    def do_handshake(self) -> None:
        try:
            self._retry(self.conn.do_handshake)
        except SSL.Error as exc:
            raise TransportError(f"handshake failed: {exc}") from exc

    def recv(self, n: int) -> bytes:
        try:
            return self._retry(self.conn.recv, n)
        except SSL.ZeroReturnError:
            return b""
        except SSL.SysCallError as exc:
            if exc.args and exc.args[0] in (-1, 0):  # unexpected EOF
                return b""
            raise TransportError(str(exc)) from exc
        except SSL.Error as exc:
            raise TransportError(f"TLS error: {exc}") from exc

    def sendall(self, data: bytes) -> None:
        view = memoryview(data)
        try:
            while view:
                sent = self._retry(self.conn.send, view[:16384])
                view = view[sent:]
        except SSL.Error as exc:
            raise TransportError(f"TLS error: {exc}") from exc

    def peer_certificate(self) -> x509.Certificate | None:
        return self.conn.get_peer_certificate(as_cryptography=True)

    def channel_binding(self) -> bytes:
        return self.conn.export_keying_material(CHANNEL_BINDING_LABEL, CHANNEL_BINDING_LENGTH)

    def shutdown(self, how=socket.SHUT_RDWR) -> None:
        try:
            self.sock.shutdown(how)
        except OSError:
            pass

    def close(self) -> None:
        try:
            self.conn.shutdown()
        except (SSL.Error, OSError):
            pass
        self.sock.close()


def data_plane_server_context(cert: Path, key: Path, client_ca: Path) -> SSL.Context:
    """Ask for a client certificate but never fail the handshake over it."""
    ctx = SSL.Context(SSL.TLS_SERVER_METHOD)
    ctx.set_min_proto_version(SSL.TLS1_2_VERSION)
    ctx.use_certificate_file(str(cert))
    ctx.use_privatekey_file(str(key))
    ctx.check_privatekey()
    ctx.load_client_ca(str(client_ca).encode())
    ctx.set_verify(SSL.VERIFY_PEER, lambda conn, cert, errno, depth, ok: True)
    return ctx


def data_plane_client_context(ca: Path, cert: Path | None = None, key: Path | None = None) -> SSL.Context:
    ctx = SSL.Context(SSL.TLS_CLIENT_METHOD)
    ctx.set_min_proto_version(SSL.TLS1_2_VERSION)
    ctx.load_verify_locations(str(ca))
    ctx.set_verify(SSL.VERIFY_PEER)
    if cert is not None:
        ctx.use_certificate_file(str(cert))
        ctx.use_privatekey_file(str(key))
    return ctx


def check_server_name(cert: x509.Certificate, host: str) -> None:
    try:
        san = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
    except x509.ExtensionNotFound:
        raise TransportError("server certificate has no subjectAltName") from None
    try:
        ip = ipaddress.ip_address(host)
    except ValueError:
        ok = host in san.get_values_for_type(x509.DNSName)
    else:
        ok = ip in san.get_values_for_type(x509.IPAddress)
    if not ok:
        raise TransportError(f"server certificate does not name {host}")


def connect_data_plane(address: str, ctx: SSL.Context, timeout: float = 10.0) -> OpenSSLStream:
    host, port = split_address(address)
    raw = socket.create_connection((host, port), timeout=timeout)
    raw.setblocking(False)
    conn = SSL.Connection(ctx, raw)
    conn.set_connect_state()
    stream = OpenSSLStream(conn, raw, timeout)
    try:
        stream.do_handshake()
        check_server_name(conn.get_peer_certificate(as_cryptography=True), host)
    except Exception:
        raw.close()
        raise
    return stream


# --- threaded TLS server -----------------------------------------------------

@dataclass
class PeerConnection:
    """An accepted, handshaken connection handed to application code."""

    stream: Stream
    transport: object
    peer_cert: x509.Certificate | None
    channel_binding: bytes = b""
    client_address: tuple = ()

    @property
    def peer_name(self) -> str | None:
        return common_name(self.peer_cert)


def stdlib_acceptor(ctx: ssl.SSLContext, timeout: float = 30.0):
    def accept(sock: socket.socket) -> PeerConnection:
        sock.settimeout(timeout)
        tls = ctx.wrap_socket(sock, server_side=True)
        return PeerConnection(Stream(tls), tls, peer_certificate(tls))
    return accept


def openssl_acceptor(ctx: SSL.Context, timeout: float = 30.0):
    def accept(sock: socket.socket) -> PeerConnection:
        sock.setblocking(False)
        conn = SSL.Connection(ctx, sock)
        conn.set_accept_state()
        stream = OpenSSLStream(conn, sock, timeout)
        stream.do_handshake()
        return PeerConnection(Stream(stream), stream, stream.peer_certificate(), stream.channel_binding())
    return accept


class TLSServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 256

    def __init__(self, address: str, acceptor: Callable[[socket.socket], PeerConnection],
                 app: Callable[[PeerConnection], None]):
        self.acceptor = acceptor
        self.app = app
        super().__init__(split_address(address), socketserver.BaseRequestHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def finish_request(self, request, client_address):
        try:
            peer = self.acceptor(request)
        except (ssl.SSLError, SSL.Error, OSError) as exc:
            log.info("handshake from %s rejected: %s", client_address, exc)
            return
        peer.client_address = client_address
        try:
            self.app(peer)
        except Exception:
            log.exception("connection handler failed")
        finally:
            try:
                peer.transport.close()
            except OSError:
                pass

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def wait_for(predicate: Callable[[], bool], timeout: float, interval: float = 0.05) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
