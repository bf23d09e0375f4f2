"""Throwaway X.509 material for the TLS probe scenarios."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID


@dataclass(frozen=True)
class CertMaterial:
    cert_pem: bytes
    key_pem: bytes = field(repr=False)
    cert: x509.Certificate = field(repr=False, compare=False, default=None)
    key: object = field(repr=False, compare=False, default=None)

    @property
    def common_name(self) -> str:
        return self.cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)[0].value

    def write(self, directory, stem: str) -> tuple:
        d = Path(directory)
        cert_path, key_path = d / f"{stem}.pem", d / f"{stem}.key"
        cert_path.write_bytes(self.cert_pem)
        key_path.write_bytes(self.key_pem)
        return cert_path, key_path


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


def _build(cn: str, key, issuer_name, issuer_key, is_ca: bool) -> x509.Certificate:
    now = dt.datetime.now(dt.timezone.utc)
    builder = (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(issuer_name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(days=1))
        .not_valid_after(now + dt.timedelta(days=1))
        .add_extension(x509.BasicConstraints(ca=is_ca, path_length=None), critical=True)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
    )
    if is_ca:
        builder = builder.add_extension(
            x509.KeyUsage(digital_signature=True, content_commitment=False, key_encipherment=False,
                          data_encipherment=False, key_agreement=False, key_cert_sign=True,
                          crl_sign=True, encipher_only=False, decipher_only=False), critical=True)
    else:
        builder = builder.add_extension(x509.SubjectAlternativeName([x509.DNSName(cn)]), critical=False)
        builder = builder.add_extension(
            x509.ExtendedKeyUsage([x509.oid.ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
    if issuer_key is not key:
        builder = builder.add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(issuer_key.public_key()), critical=False)
    return builder.sign(issuer_key, hashes.SHA256())


def _material(cert, key) -> CertMaterial:
    return CertMaterial(
        cert.public_bytes(serialization.Encoding.PEM),
        key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                          serialization.NoEncryption()),
        cert, key,
    )


def generate_ca(cn: str = "proctriage test CA") -> CertMaterial:
    key = ec.generate_private_key(ec.SECP256R1())
    return _material(_build(cn, key, _name(cn), key, True), key)


def generate_test_cert(cn: str, self_signed: bool = True, ca_material: Optional[CertMaterial] = None) -> CertMaterial:
    """Leaf certificate for ``cn``.

    ``ca_material`` wins over ``self_signed``: given a CA the leaf always
    chains to it.
    """
    if not cn:
        raise ValueError("cn must be non-empty")
    key = ec.generate_private_key(ec.SECP256R1())
    if ca_material is not None:
        cert = _build(cn, key, ca_material.cert.subject, ca_material.key, False)
    else:
        cert = _build(cn, key, _name(cn), key, False)
    return _material(cert, key)
