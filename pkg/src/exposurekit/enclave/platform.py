"""Simulated TEE platform: measurement, attestation quotes and sealing keys.

A single platform root key stands in for the vendor attestation service, and
sealing keys are derived from a platform secret plus the enclave measurement.
See docs/trust-model.md for what this does and does not model.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from importlib import resources

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .._codec import b64u_decode, b64u_encode

ATTEST_DOMAIN = b"EK-ATTEST-1"
SEAL_MAGIC = b"EKSL"
BUNDLE_MODULES = ("logs.py", "runtime.py", "report.py", "platform.py")


class AttestationError(Exception):
    pass


class SealingError(Exception):
    pass


def measure(bundle: bytes) -> bytes:
    """SHA-256 over the building-block bundle (the MRENCLAVE stand-in)."""
    return hashlib.sha256(bundle).digest()


def default_bundle() -> bytes:
    """Canonical bundle for the exposure-map building block.

    Built from the package's own enclave sources so an auditor holding the
    same source tree reproduces the measurement byte for byte.
    """
    pkg = resources.files("exposurekit.enclave")
    parts = []
    for name in sorted(BUNDLE_MODULES):
        data = pkg.joinpath(name).read_bytes().replace(b"\r\n", b"\n")
        parts.append(name.encode() + b"\0" + len(data).to_bytes(8, "little") + data)
    return b"EK-BUNDLE-1\0" + b"".join(parts)


def _hkdf(secret: bytes, info: bytes, length: int = 32) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(secret)


@dataclass(frozen=True)
class AttestationReport:
    measurement: bytes
    enclave_public_key: bytes      # Ed25519, signs heatmap reports
    encryption_public_key: bytes   # X25519, clients encrypt uploads to it
    nonce: bytes
    platform_signature: bytes

    def signed_body(self) -> bytes:
        return (ATTEST_DOMAIN + self.measurement + self.enclave_public_key
                + self.encryption_public_key + self.nonce)

    def to_dict(self) -> dict:
        return {
            "measurement": self.measurement.hex(),
            "enclave_public_key": b64u_encode(self.enclave_public_key),
            "encryption_public_key": b64u_encode(self.encryption_public_key),
            "nonce": b64u_encode(self.nonce),
            "platform_signature": b64u_encode(self.platform_signature),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttestationReport":
        try:
            return cls(bytes.fromhex(d["measurement"]), b64u_decode(d["enclave_public_key"]),
                       b64u_decode(d["encryption_public_key"]), b64u_decode(d["nonce"]),
                       b64u_decode(d["platform_signature"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise AttestationError(f"malformed attestation: {exc}") from exc


def verify_attestation(report: AttestationReport, root_public_key: bytes,
                       expected_measurement: bytes) -> bool:
    if report.measurement != expected_measurement:
        return False
    if len(report.enclave_public_key) != 32 or len(report.encryption_public_key) != 32 \
            or len(report.nonce) != 16:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(root_public_key).verify(
            report.platform_signature, report.signed_body())
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class SealedBlob:
    sealed_for: bytes
    nonce: bytes
    ciphertext: bytes  # includes the GCM tag

    def to_bytes(self) -> bytes:
        return SEAL_MAGIC + self.sealed_for + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBlob":
        if len(raw) < 4 + 32 + 12 + 16 or raw[:4] != SEAL_MAGIC:
            raise SealingError("not a sealed blob")
        return cls(raw[4:36], raw[36:48], raw[48:])


class Platform:
    """The simulated CPU: holds the root signing key and the sealing secret."""

    def __init__(self, root_secret: bytes):
        if len(root_secret) < 32:
            raise ValueError("platform root secret must be at least 32 bytes")
        self._root = Ed25519PrivateKey.from_private_bytes(_hkdf(root_secret, b"platform-root-signing"))
        self._seal_master = _hkdf(root_secret, b"platform-seal")

    @classmethod
    def generate(cls) -> "Platform":
        return cls(os.urandom(32))

    def root_public_key(self) -> bytes:
        from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat
        return self._root.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def quote(self, measurement: bytes, enclave_public_key: bytes,
              encryption_public_key: bytes, nonce: bytes) -> AttestationReport:
        unsigned = AttestationReport(measurement, enclave_public_key, encryption_public_key, nonce, b"")
        return AttestationReport(measurement, enclave_public_key, encryption_public_key, nonce,
                                 self._root.sign(unsigned.signed_body()))

    def seal(self, measurement: bytes, data: bytes) -> SealedBlob:
        nonce = os.urandom(12)
        key = _hkdf(self._seal_master, b"seal" + measurement)
        return SealedBlob(measurement, nonce, AESGCM(key).encrypt(nonce, data, SEAL_MAGIC + measurement))

    def unseal(self, measurement: bytes, blob: SealedBlob) -> bytes:
        # policy check first; the key derivation would fail anyway
        if blob.sealed_for != measurement:
            raise SealingError("blob sealed for a different enclave identity")
        key = _hkdf(self._seal_master, b"seal" + measurement)
        try:
            return AESGCM(key).decrypt(blob.nonce, blob.ciphertext, SEAL_MAGIC + measurement)
        except InvalidTag as exc:
            raise SealingError("sealed blob failed authentication") from exc
