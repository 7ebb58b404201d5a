"""Local testbed: configuration, file generation and process orchestration."""

from __future__ import annotations

import base64
import json
import os
import secrets
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import tls
from .http11 import Headers, Request, Response, Stream, read_response
from .pep import PepConfig, read_jsonl
from .security_functions import build_function, load_mfa_store, load_ruleset
from .sf_node import FunctionConfig
from .trust_policy import PolicyViolation, TrustPolicy, load_inventory, load_policy

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class StartupError(RuntimeError):
    pass


@dataclass
class FunctionSpec:
    behavior: str
    delay_ms: int = 0


@dataclass
class TopologyConfig:
    path: Path
    pki_dir: Path
    run_dir: Path
    policy_path: Path
    inventory_path: Path
    pep_listen: str
    pep_mgmt: str
    service: str
    functions: dict[str, FunctionSpec] = field(default_factory=dict)
    mfa_store_path: Path | None = None
    ips_rules_path: Path | None = None
    seal: bool = True
    pot: bool = True
    connect_timeout: float = 10.0
    request_timeout: float = 30.0

    @classmethod
    def load(cls, path: str | Path) -> TopologyConfig:
        path = Path(path).resolve()
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        base = path.parent
        topo = doc.get("topology", {})

        def rel(value):
            return None if value is None else (base / value).resolve()

        try:
            cfg = cls(
                path=path,
                pki_dir=rel(topo["pki_dir"]),
                run_dir=rel(topo.get("run_dir", "run")),
                policy_path=rel(topo["policy"]),
                inventory_path=rel(topo.get("inventory", Path(topo["pki_dir"]) / "inventory.csv")),
                mfa_store_path=rel(topo.get("mfa_store")),
                ips_rules_path=rel(topo.get("ips_rules")),
                seal=bool(topo.get("seal", True)),
                pot=bool(topo.get("pot", True)),
                connect_timeout=float(topo.get("connect_timeout", 10.0)),
                request_timeout=float(topo.get("request_timeout", 30.0)),
                pep_listen=doc["pep"]["listen"],
                pep_mgmt=doc["pep"]["mgmt_listen"],
                service=doc["service"]["address"],
                functions={
                    fid: FunctionSpec(spec.get("behavior", "pass"), int(spec.get("delay_ms", 0)))
                    for fid, spec in doc.get("functions", {}).items()
                },
            )
        except KeyError as exc:
            raise StartupError(f"{path}: missing required key {exc}") from None
        return cfg

    def policy(self) -> TrustPolicy:
        return load_policy(self.policy_path)

    def addresses(self) -> dict[str, str]:
        policy = self.policy()
        out = {"pep": self.pep_listen, "pep-mgmt": self.pep_mgmt, "service": self.service}
        for fid in self.functions:
            out[fid] = policy.function_registry[fid]
        return out

    def validate(self) -> None:
        for p in (self.pki_dir, self.policy_path, self.inventory_path):
            if not p.exists():
                raise StartupError(f"referenced file does not exist: {p}")
        addrs = self.addresses()
        if len(set(addrs.values())) != len(addrs):
            raise StartupError(f"component addresses are not distinct: {addrs}")

    def identity(self, name: str) -> tls.Identity:
        return tls.Identity.in_dir(self.pki_dir, name.lower())

    @property
    def history_path(self) -> Path:
        return self.run_dir / "history.ndjson"

    @property
    def feedback_path(self) -> Path:
        return self.run_dir / "feedback.ndjson"

    def pep_config(self, policy: TrustPolicy | None = None) -> PepConfig:
        policy = policy or self.policy()
        return PepConfig(
            listen=self.pep_listen,
            mgmt_listen=self.pep_mgmt,
            service=self.service,
            identity=self.identity("pep"),
            client_ca=self.pki_dir / "client-ca.crt",
            policy=policy,
            inventory=load_inventory(self.inventory_path),
            function_certs={fid: self.pki_dir / f"{fid.lower()}.crt" for fid in policy.function_registry},
            history_path=self.history_path,
            feedback_path=self.feedback_path,
            seal=self.seal,
            pot=self.pot,
            connect_timeout=self.connect_timeout,
            request_timeout=self.request_timeout,
        )

    def node_config(self, fid: str) -> FunctionConfig:
        spec = self.functions[fid]
        mfa_store = load_mfa_store(self.mfa_store_path) if spec.behavior == "mfa" else None
        ruleset = load_ruleset(self.ips_rules_path) if spec.behavior == "ips" else None
        return FunctionConfig(
            function_id=fid,
            listen=self.policy().function_registry[fid],
            pep_mgmt=self.pep_mgmt,
            identity=self.identity(fid),
            pep_cert=self.pki_dir / "pep.crt",
            function=build_function(fid, spec.behavior, ruleset=ruleset, mfa_store=mfa_store),
            delay_ms=spec.delay_ms,
            pot=self.pot,
            connect_timeout=self.connect_timeout,
            request_timeout=self.request_timeout,
        )


# --- testbed generation -------------------------------------------------------

def free_ports(n: int) -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind(("127.0.0.1", 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def write_testbed(directory: str | Path, *, ips_delay_ms: int = 50, seal: bool = True,
                  pot: bool = True, force: bool = False, ports: list[int] | None = None) -> Path:
    """Generate PKI, policy, MFA store and topology file; return the topology path."""
    from .pki import gen_pki

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    gen_pki(d / "pki", functions=("IPS", "MFA"), force=force)
    pep, mgmt, ips, mfa, service = ports or free_ports(5)
    (d / "policy.toml").write_text(f"""\
[policy]
threshold = 2
priority = ["MFA", "IPS"]

[policy.weights]
cert = 1
managed = 1

[functions.IPS]
address = "127.0.0.1:{ips}"
uplift = 1
compensates = "managed"

[functions.MFA]
address = "127.0.0.1:{mfa}"
uplift = 1
compensates = "cert"
""")
    secret = base64.b32encode(secrets.token_bytes(20)).decode().rstrip("=")
    (d / "mfa_store.csv").write_text(f"user_id,base32_secret\nalice,{secret}\n")
    os.chmod(d / "mfa_store.csv", 0o600)
    topo = d / "topology.toml"
    topo.write_text(f"""\
[topology]
pki_dir = "pki"
run_dir = "run"
policy = "policy.toml"
inventory = "pki/inventory.csv"
mfa_store = "mfa_store.csv"
seal = {str(seal).lower()}
pot = {str(pot).lower()}
connect_timeout = 10.0
request_timeout = 30.0

[pep]
listen = "127.0.0.1:{pep}"
mgmt_listen = "127.0.0.1:{mgmt}"

[service]
address = "127.0.0.1:{service}"

[functions.IPS]
behavior = "ips"
delay_ms = {ips_delay_ms}

[functions.MFA]
behavior = "mfa"
delay_ms = 0
""")
    return topo


# --- operator access ------------------------------------------------------------

def operator_request(config: TopologyConfig, address: str, method: str = "GET", target: str = "/.sfc/health",
                     timeout: float = 5.0) -> Response:
    ctx = tls.client_context(config.identity("harness"))
    sock = tls.connect_mtls(address, ctx, timeout)
    try:
        sock.settimeout(timeout)
        headers = Headers.from_pairs([("Host", address), ("Connection", "close")])
        sock.sendall(Request(method, target, headers).to_bytes())
        return read_response(Stream(sock), method)
    finally:
        sock.close()


def _port_free(address: str) -> bool:
    host, port = tls.split_address(address)
    s = socket.socket()
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        s.bind((host, port))
        return True
    except OSError:
        return False
    finally:
        s.close()


class Topology:
    """Handle on a running testbed: one OS process per component."""

    def __init__(self, config: TopologyConfig):
        self.config = config
        self.procs: dict[str, subprocess.Popen] = {}
        self._logs = {}

    def _commands(self) -> dict[str, list[str]]:
        base = [sys.executable, "-m", "ztsfc"]
        cfg = str(self.config.path)
        cmds = {"service": base + ["echo", "--config", cfg]}
        for fid in self.config.functions:
            cmds[fid] = base + ["node", "--config", cfg, "--function", fid]
        cmds["pep"] = base + ["pep", "--config", cfg]
        return cmds

    def start(self, timeout: float = 20.0) -> Topology:
        try:
            self.config.validate()
        except PolicyViolation as exc:
            raise StartupError(f"policy {self.config.policy_path} rejected: {exc}") from None
        busy = [a for a in self.config.addresses().values() if not _port_free(a)]
        if busy:
            raise StartupError(f"port conflict: {', '.join(busy)} already in use")
        self.config.run_dir.mkdir(parents=True, exist_ok=True)
        env = dict(os.environ)
        src = str(Path(__file__).resolve().parents[1])
        env["PYTHONPATH"] = os.pathsep.join(filter(None, [src, env.get("PYTHONPATH")]))
        for name, cmd in self._commands().items():
            log_path = self.config.run_dir / f"{name.lower()}.log"
            fh = open(log_path, "ab")
            self._logs[name] = (log_path, fh)
            self.procs[name] = subprocess.Popen(cmd, stdout=fh, stderr=subprocess.STDOUT, env=env)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            dead = {n: p.returncode for n, p in self.procs.items() if p.poll() is not None}
            if dead:
                name = next(iter(dead))
                diag = self.log_tail(name)
                self.stop()
                raise StartupError(f"{name} exited with status {dead[name]}: {diag}")
            if all(self.health().values()):
                return self
            time.sleep(0.1)
        status = self.health()
        self.stop()
        raise StartupError(f"components not healthy after {timeout}s: {status}")

    def log_tail(self, name: str, lines: int = 1) -> str:
        path, _ = self._logs[name]
        text = path.read_text(errors="replace").strip().splitlines()
        return "\n".join(text[-lines:]) if text else "(no output)"

    def health(self) -> dict[str, bool]:
        out = {}
        targets = {"pep": (self.config.pep_mgmt, "/sfc/health"), "service": (self.config.service, "/.sfc/health")}
        policy = self.config.policy()
        for fid in self.config.functions:
            targets[fid] = (policy.function_registry[fid], "/.sfc/health")
        for name, (addr, path) in targets.items():
            try:
                out[name] = operator_request(self.config, addr, target=path, timeout=1.0).status == 200
            except Exception:  # any failure means not healthy yet
                out[name] = False
        return out

    def stats(self, fid: str) -> dict:
        addr = self.config.service if fid == "service" else self.config.policy().function_registry[fid]
        return json.loads(operator_request(self.config, addr, target="/.sfc/stats").body)

    def invocations(self) -> dict[str, int]:
        return {fid: self.stats(fid)["invocations"] for fid in [*self.config.functions, "service"]}

    def history(self) -> list[dict]:
        return read_jsonl(self.config.history_path)

    def feedback(self) -> list[dict]:
        return read_jsonl(self.config.feedback_path)

    def stop(self) -> None:
        for p in self.procs.values():
            if p.poll() is None:
                p.terminate()
        for p in self.procs.values():
            try:
                p.wait(5)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
        for _, fh in self._logs.values():
            fh.close()
        self.procs.clear()

    def __enter__(self) -> Topology:
        return self.start() if not self.procs else self

    def __exit__(self, *exc) -> None:
        self.stop()


def run_topology(config: TopologyConfig | str | Path, timeout: float = 20.0) -> Topology:
    if not isinstance(config, TopologyConfig):
        config = TopologyConfig.load(config)
    return Topology(config).start(timeout)
