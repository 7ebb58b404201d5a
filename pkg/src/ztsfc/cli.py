"""``ztsfc`` command line: PKI, testbed, scenarios, soak, and component processes."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import tempfile
import threading
from dataclasses import replace
from pathlib import Path

from . import tls
from .pki import PkiExistsError, gen_pki
from .topology import StartupError, Topology, TopologyConfig, run_topology, write_testbed
from .trust_policy import PolicyViolation

EXIT_OK, EXIT_FAILURE, EXIT_STARTUP = 0, 1, 2

log = logging.getLogger("ztsfc")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _wait_for_signal() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()


# --- component processes ----------------------------------------------------------

def cmd_pep(args) -> int:
    from .pep import Pep
    from .trust_policy import load_inventory, load_policy

    cfg = TopologyConfig.load(args.config)
    try:
        policy = load_policy(cfg.policy_path)
    except PolicyViolation as exc:
        print(f"ztsfc pep: refusing to start, invalid policy {cfg.policy_path}: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    pep_cfg = cfg.pep_config(policy)
    identity = pep_cfg.identity
    pep_cfg = replace(
        pep_cfg,
        listen=args.listen or pep_cfg.listen,
        mgmt_listen=args.mgmt_listen or pep_cfg.mgmt_listen,
        identity=tls.Identity(Path(args.cert or identity.cert), Path(args.key or identity.key),
                              Path(args.ca or identity.ca)),
        client_ca=Path(args.client_ca or pep_cfg.client_ca),
        seal=pep_cfg.seal if args.seal is None else args.seal,
        pot=pep_cfg.pot if args.pot is None else args.pot,
    )
    pep = Pep(pep_cfg)
    pep.start()
    log.info("PEP data %s mgmt %s (seal=%s pot=%s)", pep_cfg.listen, pep_cfg.mgmt_listen,
             pep_cfg.seal, pep_cfg.pot)

    def reload(*_):
        try:
            pep.reload(load_policy(cfg.policy_path), load_inventory(cfg.inventory_path))
            log.info("policy and inventory reloaded")
        except (PolicyViolation, OSError, ValueError) as exc:
            log.error("reload rejected, keeping previous snapshot: %s", exc)

    signal.signal(signal.SIGHUP, reload)
    _wait_for_signal()
    pep.stop()
    return EXIT_OK


def cmd_node(args) -> int:
    from .sf_node import FunctionNode

    cfg = TopologyConfig.load(args.config)
    node_cfg = cfg.node_config(args.function)
    identity = node_cfg.identity
    node_cfg = replace(
        node_cfg,
        listen=args.listen or node_cfg.listen,
        pep_mgmt=args.pep_mgmt or node_cfg.pep_mgmt,
        identity=tls.Identity(Path(args.cert or identity.cert), Path(args.key or identity.key),
                              Path(args.ca or identity.ca)),
        delay_ms=node_cfg.delay_ms if args.delay_ms is None else args.delay_ms,
    )
    node = FunctionNode(node_cfg)
    node.start()
    log.info("function %s listening on %s (delay %d ms)", node.function_id, node.address, node_cfg.delay_ms)
    _wait_for_signal()
    node.stop()
    return EXIT_OK


def cmd_echo(args) -> int:
    from .echo import EchoService

    cfg = TopologyConfig.load(args.config)
    svc = EchoService(args.listen or cfg.service, cfg.identity("service"))
    svc.start()
    log.info("echo service listening on %s", svc.address)
    _wait_for_signal()
    svc.stop()
    return EXIT_OK


# --- operator commands -----------------------------------------------------------

def cmd_pki_gen(args) -> int:
    try:
        written = gen_pki(args.out, functions=args.functions.split(","), force=args.force)
    except PkiExistsError as exc:
        print(f"ztsfc pki gen: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    for name, path in written.items():
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_init(args) -> int:
    try:
        topo = write_testbed(args.dir, ips_delay_ms=args.ips_delay_ms, seal=args.seal,
                             pot=args.pot, force=args.force)
    except PkiExistsError as exc:
        print(f"ztsfc init: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(topo)
    return EXIT_OK


def cmd_up(args) -> int:
    try:
        topo = run_topology(args.config)
    except (StartupError, PolicyViolation, OSError) as exc:
        print(f"ztsfc up: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    print(json.dumps({"healthy": topo.health(), "addresses": topo.config.addresses()}, indent=2))
    try:
        _wait_for_signal()
    finally:
        topo.stop()
    return EXIT_OK


def _with_topology(args, fn) -> int:
    tmp = None
    if args.config:
        config = args.config
    else:
        tmp = tempfile.TemporaryDirectory(prefix="ztsfc-")
        config = write_testbed(tmp.name)
    try:
        topo = run_topology(config)
    except (StartupError, PolicyViolation, OSError) as exc:
        print(f"ztsfc: startup failed: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    try:
        return fn(topo)
    finally:
        topo.stop()
        if tmp is not None:
            tmp.cleanup()


def cmd_scenarios_run(args) -> int:
    from .scenarios import run_scenarios

    def run(topo: Topology) -> int:
        report = run_scenarios(topo, latency_requests=args.latency_requests)
        for r in report.results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  observed={json.dumps(r.observed)}")
        if args.report:
            Path(args.report).write_text(report.to_json())
        print(report.to_dict()["summary"])
        return EXIT_OK if report.passed else EXIT_FAILURE

    return _with_topology(args, run)


def cmd_soak(args) -> int:
    from .scenarios import run_soak

    def run(topo: Topology) -> int:
        report = run_soak(topo, args.concurrency)
        print(json.dumps(report.to_dict(), indent=2))
        return EXIT_OK if report.passed else EXIT_FAILURE

    return _with_topology(args, run)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ztsfc", description="Zero trust service function chaining testbed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pki = sub.add_parser("pki", help="test PKI").add_subparsers(dest="pki_command", required=True)
    gen = pki.add_parser("gen", help="generate CAs, identities and device inventory")
    gen.add_argument("--out", required=True)
    gen.add_argument("--functions", default="IPS,MFA")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_pki_gen)

    init = sub.add_parser("init", help="write a complete local testbed (PKI, policy, topology)")
    init.add_argument("dir")
    init.add_argument("--ips-delay-ms", type=int, default=50)
    init.add_argument("--seal", type=_on_off, default=True)
    init.add_argument("--pot", type=_on_off, default=True)
    init.add_argument("--force", action="store_true")
    init.set_defaults(func=cmd_init)

    up = sub.add_parser("up", help="launch the topology and wait")
    up.add_argument("--config", required=True)
    up.set_defaults(func=cmd_up)

    scen = sub.add_parser("scenarios").add_subparsers(dest="scenarios_command", required=True)
    run = scen.add_parser("run", help="launch the topology and run the scenario suite")
    run.add_argument("--config", help="topology file (default: a fresh temporary testbed)")
    run.add_argument("--report", help="write the JSON report here")
    run.add_argument("--latency-requests", type=int, default=50)
    run.set_defaults(func=cmd_scenarios_run)

    soak = sub.add_parser("soak", help="concurrent green/blue isolation check")
    soak.add_argument("--config")
    soak.add_argument("--concurrency", type=int, default=100)
    soak.set_defaults(func=cmd_soak)

    pep = sub.add_parser("pep", help="run the policy enforcement point")
    pep.add_argument("--config", required=True)
    pep.add_argument("--listen")
    pep.add_argument("--mgmt-listen")
    pep.add_argument("--ca", help="enterprise CA for upstream and management peers")
    pep.add_argument("--client-ca", help="CA that issues client certificates")
    pep.add_argument("--cert")
    pep.add_argument("--key")
    pep.add_argument("--seal", type=_on_off)
    pep.add_argument("--pot", type=_on_off)
    pep.set_defaults(func=cmd_pep)

    node = sub.add_parser("node", help="run one service-function node")
    node.add_argument("--config", required=True)
    node.add_argument("--function", required=True)
    node.add_argument("--listen")
    node.add_argument("--pep-mgmt")
    node.add_argument("--ca")
    node.add_argument("--cert")
    node.add_argument("--key")
    node.add_argument("--delay-ms", type=int)
    node.set_defaults(func=cmd_node)

    echo = sub.add_parser("echo", help="run the echo service")
    echo.add_argument("--config", required=True)
    echo.add_argument("--listen")
    echo.set_defaults(func=cmd_echo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (StartupError, OSError, ValueError) as exc:
        print(f"ztsfc {args.command}: {exc}", file=sys.stderr)
        return EXIT_STARTUP
