"""Throw-away PKI for the local testbed.

Two trust domains are created: the enterprise CA certifies infrastructure
(PEP, functions, service, harness operator) and the PEP's client CA certifies
end-user devices. Components accept only enterprise-certified peers, so a
client certificate never opens a connection to anything but the PEP.
"""

from __future__ import annotations

import datetime as dt
import ipaddress
import os
import secrets
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

ENTERPRISE_CA = "enterprise-ca"
CLIENT_CA = "client-ca"
FOREIGN_CA = "foreign-ca"
MANAGED_DEVICE = "dev-managed"
UNMANAGED_DEVICE = "dev-unmanaged"


class PkiExistsError(FileExistsError):
    pass


@dataclass
class _Issuer:
    cert: x509.Certificate
    key: ec.EllipticCurvePrivateKey


def _name(cn: str, org: str = "ZTSFC testbed") -> x509.Name:
    return x509.Name([
        x509.NameAttribute(NameOID.ORGANIZATION_NAME, org),
        x509.NameAttribute(NameOID.COMMON_NAME, cn),
    ])


def _write(out: Path, stem: str, cert: x509.Certificate, key: ec.EllipticCurvePrivateKey) -> None:
    (out / f"{stem}.crt").write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path = out / f"{stem}.key"
    key_path.write_bytes(key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    ))
    os.chmod(key_path, 0o600)


def _make_ca(cn: str, now: dt.datetime, days: int) -> _Issuer:
    key = ec.generate_private_key(ec.SECP256R1())
    cert = (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(_name(cn))
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(minutes=5))
        .not_valid_after(now + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True, key_cert_sign=True, crl_sign=True,
                content_commitment=False, key_encipherment=False, data_encipherment=False,
                key_agreement=False, encipher_only=False, decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(key, hashes.SHA256())
    )
    return _Issuer(cert, key)


def issue_leaf(issuer: _Issuer, cn: str, *, server: bool = True, client: bool = True,
               hosts: Iterable[str] = ("127.0.0.1", "localhost", "::1"),
               not_before: dt.datetime | None = None, days: int = 365,
               ) -> tuple[x509.Certificate, ec.EllipticCurvePrivateKey]:
    now = dt.datetime.now(dt.timezone.utc)
    not_before = not_before or now - dt.timedelta(minutes=5)
    key = ec.generate_private_key(ec.SECP256R1())
    usages = []
    if server:
        usages.append(ExtendedKeyUsageOID.SERVER_AUTH)
    if client:
        usages.append(ExtendedKeyUsageOID.CLIENT_AUTH)
    sans = []
    for h in hosts:
        try:
            sans.append(x509.IPAddress(ipaddress.ip_address(h)))
        except ValueError:
            sans.append(x509.DNSName(h))
    builder = (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(issuer.cert.subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before)
        .not_valid_after(not_before + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True, key_agreement=True, key_cert_sign=False, crl_sign=False,
                content_commitment=False, key_encipherment=False, data_encipherment=False,
                encipher_only=False, decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(x509.ExtendedKeyUsage(usages), critical=False)
        .add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(issuer.key.public_key()), critical=False
        )
    )
    if sans:
        builder = builder.add_extension(x509.SubjectAlternativeName(sans), critical=False)
    return builder.sign(issuer.key, hashes.SHA256()), key


def gen_pki(out_dir: str | Path, functions: Iterable[str] = ("IPS", "MFA"),
            force: bool = False, days: int = 365) -> dict[str, Path]:
    """Create the testbed's CAs, leaf identities and device inventory.

    Returns a map of identity name to certificate path. Refuses to touch a
    non-empty directory unless ``force`` is set.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise PkiExistsError(f"{out} already contains files; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    now = dt.datetime.now(dt.timezone.utc)

    enterprise = _make_ca("ZTSFC Enterprise CA", now, days)
    client_ca = _make_ca("ZTSFC PEP Client CA", now, days)
    foreign = _make_ca("Foreign CA", now, days)
    _write(out, ENTERPRISE_CA, enterprise.cert, enterprise.key)
    _write(out, CLIENT_CA, client_ca.cert, client_ca.key)
    _write(out, FOREIGN_CA, foreign.cert, foreign.key)

    written = {stem: out / f"{stem}.crt" for stem in (ENTERPRISE_CA, CLIENT_CA, FOREIGN_CA)}
    infra = ["pep", "service", "harness", *functions]
    for cn in infra:
        cert, key = issue_leaf(enterprise, cn)
        stem = cn.lower()
        _write(out, stem, cert, key)
        written[stem] = out / f"{stem}.crt"

    for stem in ("client-managed", "client-unmanaged"):
        cert, key = issue_leaf(client_ca, stem, server=False, hosts=())
        _write(out, stem, cert, key)
        written[stem] = out / f"{stem}.crt"

    # Foreign identity reuses a legitimate function name to show the name alone is worthless.
    cert, key = issue_leaf(foreign, next(iter(functions), "IPS"))
    _write(out, "foreign", cert, key)
    written["foreign"] = out / "foreign.crt"

    inventory = out / "inventory.csv"
    inventory.write_text(
        "device_id,secret_hex,managed\n"
        f"{MANAGED_DEVICE},{secrets.token_hex(32)},true\n"
        f"{UNMANAGED_DEVICE},{secrets.token_hex(32)},false\n"
    )
    os.chmod(inventory, 0o600)
    return written
