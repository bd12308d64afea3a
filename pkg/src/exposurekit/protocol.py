"""Exposure-notification key schedule and matching.

Everything here is a pure function of its arguments. Keys are 16 bytes;
interval numbers count 600-second windows since the Unix epoch.

Derivation layout (GAEN-shaped, not claimed bit-compatible with any vendor
build):

    RPIK = HKDF-SHA256(TEK, salt=None, info="EN-RPIK", 16)
    AEMK = HKDF-SHA256(TEK, salt=None, info="EN-AEMK", 16)
    RPI  = AES-128(RPIK, "EN-RPI" || 0x00*6 || uint32_le(interval))
    AEM  = AES-128-CTR(AEMK, iv=RPI, metadata)
"""

from __future__ import annotations

import os
import struct
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

INTERVAL_SECONDS = 600
INTERVALS_PER_DAY = 144
KEY_LENGTH = 16
TEK_RETENTION_DAYS = 14
DEFAULT_TOLERANCE = 2
AEM_VERSION = 0x40

RPIK_INFO = b"EN-RPIK"
AEMK_INFO = b"EN-AEMK"
RPI_PREFIX = b"EN-RPI" + bytes(6)


def interval_number(t: float) -> int:
    """Return the 10-minute epoch interval containing unix time ``t``."""
    if t < 0:
        raise ValueError(f"timestamp must be non-negative, got {t}")
    return int(t // INTERVAL_SECONDS)


def day_of_interval(interval: int) -> int:
    return interval // INTERVALS_PER_DAY


def day_index(t: float) -> int:
    return day_of_interval(interval_number(t))


class EntropySource(Protocol):
    def randbytes(self, n: int) -> bytes: ...


@dataclass(frozen=True)
class TemporaryExposureKey:
    key: bytes
    valid_from: int

    def __post_init__(self) -> None:
        if len(self.key) != KEY_LENGTH:
            raise ValueError(f"TEK must be {KEY_LENGTH} bytes, got {len(self.key)}")
        if self.valid_from < 0 or self.valid_from % INTERVALS_PER_DAY:
            raise ValueError(f"valid_from {self.valid_from} is not day-aligned")

    @property
    def day(self) -> int:
        return self.valid_from // INTERVALS_PER_DAY


@dataclass(frozen=True)
class PublishedTEK:
    """A TEK as released by the diagnosis server.

    ``onset_day`` is the uploader's estimated symptom-onset day, if given.
    """

    tek: TemporaryExposureKey
    report_time: int
    onset_day: int | None = None

    def __post_init__(self) -> None:
        if self.report_time < self.tek.valid_from:
            raise ValueError("report_time precedes the key's validity")


class ObservedContact(Protocol):
    rpi: bytes
    first_seen: float


@dataclass(frozen=True)
class MatchEvent:
    tek_index: int
    contact: ObservedContact
    matched_interval: int


def generate_tek(rng: EntropySource | None, day: int) -> TemporaryExposureKey:
    """Draw a fresh TEK for ``day``; ``rng=None`` uses the OS CSPRNG."""
    if day < 0:
        raise ValueError("day must be non-negative")
    key = os.urandom(KEY_LENGTH) if rng is None else rng.randbytes(KEY_LENGTH)
    return TemporaryExposureKey(key, day * INTERVALS_PER_DAY)


def _hkdf(secret: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_LENGTH, salt=None, info=info).derive(secret)


def _tek_bytes(tek: TemporaryExposureKey | bytes) -> bytes:
    return tek.key if isinstance(tek, TemporaryExposureKey) else bytes(tek)


def derive_rpik(tek: TemporaryExposureKey | bytes) -> bytes:
    return _hkdf(_tek_bytes(tek), RPIK_INFO)


def derive_aemk(tek: TemporaryExposureKey | bytes) -> bytes:
    return _hkdf(_tek_bytes(tek), AEMK_INFO)


def _padded(interval: int) -> bytes:
    return RPI_PREFIX + struct.pack("<I", interval)


def derive_rpi(rpik: bytes, interval: int) -> bytes:
    enc = Cipher(algorithms.AES(rpik), modes.ECB()).encryptor()
    return enc.update(_padded(interval)) + enc.finalize()


def _rpis_for_range(rpik: bytes, start: int, count: int) -> list[bytes]:
    # one ECB pass over all padded blocks; ECB is block-independent
    enc = Cipher(algorithms.AES(rpik), modes.ECB()).encryptor()
    blob = enc.update(b"".join(_padded(start + k) for k in range(count))) + enc.finalize()
    return [blob[16 * k:16 * (k + 1)] for k in range(count)]


def expand_tek(tek: TemporaryExposureKey) -> list[tuple[int, bytes]]:
    """All (interval, RPI) pairs for the key's day."""
    rpis = _rpis_for_range(derive_rpik(tek), tek.valid_from, INTERVALS_PER_DAY)
    return [(tek.valid_from + k, rpi) for k, rpi in enumerate(rpis)]


def _aem_xcrypt(aemk: bytes, rpi: bytes, data: bytes) -> bytes:
    ctx = Cipher(algorithms.AES(aemk), modes.CTR(rpi)).encryptor()
    return ctx.update(data) + ctx.finalize()


def encrypt_aem(aemk: bytes, rpi: bytes, metadata: bytes) -> bytes:
    if not 1 <= len(metadata) <= 4:
        raise ValueError(f"metadata must be 1-4 bytes, got {len(metadata)}")
    return _aem_xcrypt(aemk, rpi, metadata)


def decrypt_aem(aemk: bytes, rpi: bytes, aem: bytes) -> bytes:
    if not 1 <= len(aem) <= 4:
        raise ValueError(f"AEM must be 1-4 bytes, got {len(aem)}")
    return _aem_xcrypt(aemk, rpi, aem)


def encode_metadata(tx_power: int) -> bytes:
    """Pack transmit power (dBm) into the 4-byte metadata layout."""
    if not -128 <= tx_power <= 127:
        raise ValueError(f"tx_power {tx_power} does not fit a signed byte")
    return struct.pack("<Bbxx", AEM_VERSION, tx_power)


def decode_metadata(metadata: bytes) -> int:
    if len(metadata) < 2:
        raise ValueError("metadata too short to carry tx power")
    return struct.unpack_from("<b", metadata, 1)[0]


def match_keys(
    published: Sequence[PublishedTEK],
    observed: Iterable[ObservedContact],
    tolerance: int = DEFAULT_TOLERANCE,
) -> list[MatchEvent]:
    """Find contacts whose RPI derives from a published TEK near the time seen.

    A contact matches TEK ``k`` at interval ``i`` when the RPI for ``i`` equals
    the stored RPI and ``i`` lies within ``tolerance`` intervals of the
    contact's first sighting. Results are ordered by (tek_index, contact order).
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    by_rpi: dict[bytes, list[tuple[int, ObservedContact]]] = defaultdict(list)
    for order, contact in enumerate(observed):
        by_rpi[bytes(contact.rpi)].append((order, contact))
    if not by_rpi or not published:
        return []

    hits: list[tuple[int, int, MatchEvent]] = []
    for k, entry in enumerate(published):
        for interval, rpi in expand_tek(entry.tek):
            for order, contact in by_rpi.get(rpi, ()):
                if abs(interval - interval_number(contact.first_seen)) <= tolerance:
                    hits.append((k, order, MatchEvent(k, contact, interval)))
    hits.sort(key=lambda h: (h[0], h[1]))
    return [h[2] for h in hits]
