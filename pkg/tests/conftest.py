from __future__ import annotations

import json
import sys
import threading

import pytest
from cryptography.hazmat.primitives.asymmetric import ec

from ztsfc import tls
from ztsfc.echo import EchoService
from ztsfc.http11 import read_request, simple_response
from ztsfc.pep import Pep, read_jsonl
from ztsfc.pki import gen_pki
from ztsfc.sf_node import FunctionNode
from ztsfc.topology import TopologyConfig, write_testbed
from ztsfc.trust_policy import TrustPolicy

IPS_ADDR = "127.0.0.1:9101"
MFA_ADDR = "127.0.0.1:9102"
SERVICE_ADDR = "127.0.0.1:9000"


def fixture_policy(**overrides) -> TrustPolicy:
    fields = dict(
        threshold=2,
        attribute_weights={"cert": 1, "managed": 1},
        function_uplift={"IPS": 1, "MFA": 1},
        compensation={"managed": "IPS", "cert": "MFA"},
        function_priority=("MFA", "IPS"),
        function_registry={"IPS": IPS_ADDR, "MFA": MFA_ADDR},
    )
    fields.update(overrides)
    return TrustPolicy(**fields)


@pytest.fixture
def policy() -> TrustPolicy:
    return fixture_policy()


@pytest.fixture(scope="session")
def keypairs():
    """One P-256 key pair per role, generated once for the session."""
    return {name: ec.generate_private_key(ec.SECP256R1()) for name in ("pep", "IPS", "MFA", "X")}


@pytest.fixture(scope="session")
def pki_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pki")
    gen_pki(d, functions=("IPS", "MFA"), force=True)
    return d


# --- in-process components -------------------------------------------------------

class Recorder:
    """mTLS server that keeps every request it receives and answers with ``respond``."""

    def __init__(self, identity, respond=None, address="127.0.0.1:0"):
        self.requests = []
        self.respond = respond or (lambda req: simple_response(200, b"ok\n"))
        self._lock = threading.Lock()
        self.server = tls.TLSServer(address, tls.stdlib_acceptor(tls.server_context(identity)), self._handle)
        self.server.start()

    @property
    def address(self):
        return self.server.address

    def _handle(self, peer):
        req = read_request(peer.stream)
        if req is None:
            return
        with self._lock:
            self.requests.append((peer.peer_name, req))
        resp = self.respond(req)
        if resp is not None:
            peer.stream.sendall(resp.to_bytes())

    def bodies(self):
        return [json.loads(r.body) for _, r in self.requests]

    def stop(self):
        self.server.stop()


class InProcessBed:
    """PEP, function nodes and echo service as threads of the test process."""

    def __init__(self, config: TopologyConfig):
        self.config = config
        self.echo = EchoService(config.service, config.identity("service"))
        self.nodes = {fid: FunctionNode(config.node_config(fid)) for fid in config.functions}
        self.pep = Pep(config.pep_config())

    def start(self):
        self.echo.start()
        for node in self.nodes.values():
            node.start()
        self.pep.start()
        return self

    def stop(self):
        self.pep.stop()
        for node in self.nodes.values():
            node.stop()
        self.echo.stop()

    def invocations(self):
        out = {fid: n.config.function.snapshot()["invocations"] for fid, n in self.nodes.items()}
        out["service"] = self.echo.invocations
        return out

    def history(self):
        return read_jsonl(self.config.history_path)

    def feedback(self):
        return read_jsonl(self.config.feedback_path)

    def record_for(self, before: int):
        """History records appended since ``before``."""
        return self.history()[before:]


@pytest.fixture(scope="module")
def bed(tmp_path_factory):
    d = tmp_path_factory.mktemp("bed")
    config = TopologyConfig.load(write_testbed(d, ips_delay_ms=0))
    b = InProcessBed(config).start()
    yield b
    b.stop()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.TITLES):
        if n not in results:
            terminalreporter.write_line(f"SKIP  criterion {n} ({module.TITLES[n]}): not run")
            continue
        ok, title, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n} ({title}): {detail}")
