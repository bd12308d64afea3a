"""Location logs, their canonical encoding, and upload encryption.

Coordinates are fixed-point micro-degrees (int32) and times whole seconds
(int64), little-endian, with points sorted, so a user and the enclave hash
identical bytes for the same log.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .platform import AttestationError, AttestationReport, verify_attestation

LOG_MAGIC = b"EKLOC1"
MICRO = 1_000_000
_POINT = struct.Struct("<iiq")
INGEST_INFO = b"EK-INGEST-1"


class LogFormatError(ValueError):
    pass


def to_micro(deg: float) -> int:
    return int(round(deg * MICRO))


@dataclass(frozen=True)
class GridConfig:
    """Rows step north in latitude from the origin, columns east in longitude.

    ``min_count`` > 0 zeroes cells below that count after aggregation.
    """

    origin_lat: float
    origin_lon: float
    rows: int
    cols: int
    cell_deg: float = 0.001
    min_count: int = 0

    def __post_init__(self) -> None:
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("grid must have at least one cell")
        if self.cell_micro <= 0:
            raise ValueError("cell size must be at least one micro-degree")
        if self.min_count < 0:
            raise ValueError("min_count must be non-negative")

    @property
    def origin_lat_micro(self) -> int:
        return to_micro(self.origin_lat)

    @property
    def origin_lon_micro(self) -> int:
        return to_micro(self.origin_lon)

    @property
    def cell_micro(self) -> int:
        return to_micro(self.cell_deg)

    def cell_of(self, lat_u: int, lon_u: int) -> tuple[int, int] | None:
        r = (lat_u - self.origin_lat_micro) // self.cell_micro
        c = (lon_u - self.origin_lon_micro) // self.cell_micro
        if 0 <= r < self.rows and 0 <= c < self.cols:
            return r, c
        return None

    def to_dict(self) -> dict:
        return {"origin_lat": self.origin_lat, "origin_lon": self.origin_lon, "rows": self.rows,
                "cols": self.cols, "cell_deg": self.cell_deg, "min_count": self.min_count}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(float(d["origin_lat"]), float(d["origin_lon"]), int(d["rows"]), int(d["cols"]),
                   float(d.get("cell_deg", 0.001)), int(d.get("min_count", 0)))


@dataclass(frozen=True)
class LocationLog:
    log_id: bytes
    user_id: str
    points: tuple[tuple[float, float, float], ...]  # (lat, lon, unix seconds)

    def __post_init__(self) -> None:
        if len(self.log_id) != 16:
            raise LogFormatError("log_id must be 16 bytes")
        if not self.points:
            raise LogFormatError("a location log needs at least one point")

    @classmethod
    def new(cls, user_id: str, points: Iterable[tuple[float, float, float]],
            log_id: bytes | None = None) -> "LocationLog":
        return cls(log_id or os.urandom(16), user_id, tuple(tuple(p) for p in points))

    def quantized_points(self) -> list[tuple[int, int, int]]:
        return sorted((to_micro(lat), to_micro(lon), int(t)) for lat, lon, t in self.points)

    def canonical_bytes(self) -> bytes:
        uid = self.user_id.encode()
        pts = self.quantized_points()
        return (LOG_MAGIC + self.log_id + struct.pack("<H", len(uid)) + uid
                + struct.pack("<I", len(pts)) + b"".join(_POINT.pack(*p) for p in pts))

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_bytes()).digest()

    def days(self) -> set[int]:
        return {int(t) // 86400 for _, _, t in self.quantized_points()}

    @classmethod
    def from_canonical(cls, data: bytes) -> "LocationLog":
        try:
            if data[:6] != LOG_MAGIC:
                raise LogFormatError("bad log magic")
            log_id = data[6:22]
            (ulen,) = struct.unpack_from("<H", data, 22)
            user_id = data[24:24 + ulen].decode()
            off = 24 + ulen
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            if len(data) != off + n * _POINT.size:
                raise LogFormatError("log length does not match point count")
            pts = [_POINT.unpack_from(data, off + k * _POINT.size) for k in range(n)]
        except (struct.error, UnicodeDecodeError) as exc:
            raise LogFormatError(f"malformed log: {exc}") from exc
        if pts != sorted(pts):
            raise LogFormatError("points not in canonical order")
        return cls(log_id, user_id, tuple((la / MICRO, lo / MICRO, t) for la, lo, t in pts))


def _ingest_key(shared: bytes, eph_pub: bytes, enclave_pub: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=INGEST_INFO + eph_pub + enclave_pub).derive(shared)


def encrypt_for_enclave(log: LocationLog, attestation: AttestationReport,
                        root_public_key: bytes, expected_measurement: bytes) -> bytes:
    """Client side: verify the enclave's attestation, then encrypt to it."""
    if not verify_attestation(attestation, root_public_key, expected_measurement):
        raise AttestationError("enclave attestation did not verify")
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(attestation.encryption_public_key))
    key = _ingest_key(shared, eph_pub, attestation.encryption_public_key)
    nonce = os.urandom(12)
    return eph_pub + nonce + AESGCM(key).encrypt(nonce, log.canonical_bytes(), attestation.measurement)


def decrypt_upload(private_key: X25519PrivateKey, measurement: bytes, payload: bytes) -> bytes:
    if len(payload) < 32 + 12 + 16:
        raise LogFormatError("upload too short")
    eph_pub, nonce, ct = payload[:32], payload[32:44], payload[44:]
    own_pub = private_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    try:
        shared = private_key.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        return AESGCM(_ingest_key(shared, eph_pub, own_pub)).decrypt(nonce, ct, measurement)
    except (InvalidTag, ValueError) as exc:
        raise LogFormatError("upload does not decrypt under this enclave's key") from exc
