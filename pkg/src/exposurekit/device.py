"""Per-device client: contact logging, TEK history, scoring and status card."""

from __future__ import annotations

import logging
import math
import os
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from ._codec import b64u_decode, b64u_encode
from .protocol import (
    DEFAULT_TOLERANCE,
    TEK_RETENTION_DAYS,
    MatchEvent,
    PublishedTEK,
    TemporaryExposureKey,
    day_index,
    decode_metadata,
    decrypt_aem,
    derive_aemk,
    derive_rpi,
    derive_rpik,
    encode_metadata,
    encrypt_aem,
    generate_tek,
    match_keys,
)

log = logging.getLogger(__name__)

SESSION_GAP_SECONDS = 300.0
RETENTION_SECONDS = TEK_RETENTION_DAYS * 86400
DEFAULT_VALIDITY_DAYS = 4.0

NO_TEST = "no_test"
VALID = "valid"
EXPIRED = "expired"
INVALIDATED = "invalidated_by_exposure"
POSITIVE = "positive"


class StaleResultError(ValueError):
    """A test result older than the one already applied."""


class BundleError(ValueError):
    """State bundle failed authentication or could not be parsed."""


@dataclass
class ContactRecord:
    rpi: bytes
    first_seen: float
    last_seen: float
    duration: float
    min_rssi: float
    max_rssi: float
    mean_rssi: float
    sightings: int
    coarse_day: int
    aem: bytes = b""
    tx_power: float | None = None


@dataclass(frozen=True)
class ScoringConfig:
    duration_cap_minutes: float = 30.0
    # (upper bound dB, weight); attenuation above the last bound weighs 0
    attenuation_buckets: tuple[tuple[float, float], ...] = ((50.0, 1.0), (70.0, 0.5))
    # contact day minus onset day -> weight; missing offsets weigh 0
    onset_weights: Mapping[int, float] = field(
        default_factory=lambda: {d: 1.0 for d in range(-2, 15)})
    notify_threshold: float = 15.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "attenuation_buckets",
                           tuple((float(b), float(w)) for b, w in self.attenuation_buckets))
        object.__setattr__(self, "onset_weights",
                           {int(k): float(v) for k, v in dict(self.onset_weights).items()})
        self.validate()

    def validate(self) -> None:
        weights = [w for _, w in self.attenuation_buckets] + list(self.onset_weights.values())
        if any(not 0.0 <= w <= 1.0 for w in weights):
            raise ValueError("weights must lie in [0, 1]")
        bounds = [b for b, _ in self.attenuation_buckets]
        if bounds != sorted(bounds) or len(set(bounds)) != len(bounds):
            raise ValueError("attenuation buckets must be strictly ascending")
        if not self.notify_threshold > 0:
            raise ValueError("notify_threshold must be positive")
        if not self.duration_cap_minutes > 0:
            raise ValueError("duration_cap_minutes must be positive")

    def bucket_weight(self, attenuation_db: float) -> float:
        for bound, weight in self.attenuation_buckets:
            if attenuation_db <= bound:
                return weight
        return 0.0

    def to_dict(self) -> dict:
        return {
            "duration_cap_minutes": self.duration_cap_minutes,
            "attenuation_buckets": [list(b) for b in self.attenuation_buckets],
            "onset_weights": {str(k): v for k, v in sorted(self.onset_weights.items())},
            "notify_threshold": self.notify_threshold,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScoringConfig":
        known = {"duration_cap_minutes", "attenuation_buckets", "onset_weights", "notify_threshold"}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown scoring fields: {sorted(extra)}")
        kwargs = dict(data)
        if "attenuation_buckets" in kwargs:
            kwargs["attenuation_buckets"] = tuple(tuple(b) for b in kwargs["attenuation_buckets"])
        return cls(**kwargs)


def attenuation(contact: ContactRecord) -> float:
    tx = contact.tx_power if contact.tx_power is not None else 0.0
    return tx - contact.mean_rssi


def exposure_score(matches: Iterable[MatchEvent], onset_day: int | None,
                   cfg: ScoringConfig) -> float:
    """Sum of capped minutes x attenuation weight x onset weight.

    ``onset_day=None`` treats every contact as occurring on the onset day.
    """
    score = 0.0
    for m in matches:
        c = m.contact
        minutes = min(c.duration / 60.0, cfg.duration_cap_minutes)
        offset = 0 if onset_day is None else c.coarse_day - onset_day
        score += minutes * cfg.bucket_weight(attenuation(c)) * cfg.onset_weights.get(offset, 0.0)
    return score


def status_at(events: Sequence[tuple[str, float]], now: float,
              validity_days: float = DEFAULT_VALIDITY_DAYS) -> str:
    """Status card state recomputed from the full event log.

    Events are ("negative" | "positive" | "exposure", time) in arrival order.
    """
    last_result, last_test, exposed = None, None, False
    for kind, t in events:
        if kind in ("negative", "positive"):
            last_result, last_test, exposed = kind, t, False
        elif kind == "exposure" and last_result != "positive":
            exposed = True
    if last_result == "positive":
        return POSITIVE
    if exposed:
        return INVALIDATED
    if last_result is None:
        return NO_TEST
    return VALID if now - last_test <= validity_days * 86400 else EXPIRED


class StatusCard:
    """Incrementally maintained status; ``state(now)`` mirrors ``status_at``."""

    def __init__(self, validity_days: float = DEFAULT_VALIDITY_DAYS):
        self.validity_days = validity_days
        self.events: list[tuple[str, float]] = []
        self.last_result: str | None = None
        self.last_test_time: float | None = None
        self.exposed = False

    def record_test(self, result: str, t: float) -> None:
        if result not in ("negative", "positive"):
            raise ValueError(f"unknown result {result!r}")
        if self.last_test_time is not None and t < self.last_test_time:
            raise StaleResultError(f"result at {t} predates current result at {self.last_test_time}")
        self.events.append((result, t))
        self.last_result, self.last_test_time, self.exposed = result, t, False

    def record_exposure(self, t: float) -> None:
        self.events.append(("exposure", t))
        if self.last_result != "positive":
            self.exposed = True

    def state(self, now: float) -> str:
        if self.last_result == "positive":
            return POSITIVE
        if self.exposed:
            return INVALIDATED
        if self.last_result is None:
            return NO_TEST
        return VALID if now - self.last_test_time <= self.validity_days * 86400 else EXPIRED

    @classmethod
    def from_events(cls, events: Iterable[tuple[str, float]],
                    validity_days: float = DEFAULT_VALIDITY_DAYS) -> "StatusCard":
        card = cls(validity_days)
        for kind, t in events:
            if kind == "exposure":
                card.record_exposure(t)
            else:
                card.record_test(kind, t)
        return card


@dataclass
class ExposureOutcome:
    score: float
    notified: bool
    matches: int
    status: str


class DeviceAgent:
    """Client state for one device. Single owner; not thread-safe.

    ``scan_window`` is the time one sighting stands for. Direct API use keeps it
    at 0 so duration is last minus first sighting; the simulator sets it to its
    tick so a contact seen on n consecutive scans lasts n ticks.
    """

    def __init__(self, user_id: str, rng: random.Random | None = None, tx_power: int = 0,
                 scan_window: float = 0.0, validity_days: float = DEFAULT_VALIDITY_DAYS):
        self.user_id = user_id
        self.rng = rng
        self.tx_power = tx_power
        self.scan_window = scan_window
        self.teks: dict[int, TemporaryExposureKey] = {}
        self.contacts: list[ContactRecord] = []
        self.status = StatusCard(validity_days)
        self.upload_code: str | None = None
        self.scanning = True
        self._open: dict[bytes, ContactRecord] = {}

    # -- broadcasting -------------------------------------------------------

    def tek_for_day(self, day: int) -> TemporaryExposureKey:
        if day not in self.teks:
            self.teks[day] = generate_tek(self.rng, day)
        return self.teks[day]

    def identity(self, interval: int) -> tuple[bytes, bytes]:
        tek = self.tek_for_day(interval // 144)
        rpi = derive_rpi(derive_rpik(tek), interval)
        return rpi, encrypt_aem(derive_aemk(tek), rpi, encode_metadata(self.tx_power))

    def tek_history(self, now: float) -> list[TemporaryExposureKey]:
        today = day_index(now)
        return [self.teks[d] for d in sorted(self.teks) if today - TEK_RETENTION_DAYS < d <= today]

    # -- scanning -----------------------------------------------------------

    def on_observation(self, rpi: bytes, aem: bytes, rssi: float, t: float) -> ContactRecord | None:
        if not self.scanning:
            return None
        rec = self._open.get(rpi)
        if rec is not None and 0 <= t - rec.last_seen <= SESSION_GAP_SECONDS:
            rec.mean_rssi += (rssi - rec.mean_rssi) / (rec.sightings + 1)
            rec.sightings += 1
            rec.min_rssi = min(rec.min_rssi, rssi)
            rec.max_rssi = max(rec.max_rssi, rssi)
            rec.last_seen = max(rec.last_seen, t)
            rec.duration = rec.last_seen - rec.first_seen + self.scan_window
        else:
            rec = ContactRecord(rpi=bytes(rpi), first_seen=t, last_seen=t,
                                duration=self.scan_window, min_rssi=rssi, max_rssi=rssi,
                                mean_rssi=rssi, sightings=1, coarse_day=day_index(t),
                                aem=bytes(aem))
            self.contacts.append(rec)
            self._open[rec.rpi] = rec
        self.prune(t)
        return rec

    def prune(self, now: float) -> None:
        cutoff = now - RETENTION_SECONDS
        if self.contacts and self.contacts[0].first_seen < cutoff:
            self.contacts = [c for c in self.contacts if c.first_seen >= cutoff]
            self._open = {rpi: c for rpi, c in self._open.items() if c.first_seen >= cutoff}
        oldest_day = day_index(max(now, 0)) - TEK_RETENTION_DAYS
        for d in [d for d in self.teks if d <= oldest_day]:
            del self.teks[d]

    # -- exposure checks ----------------------------------------------------

    def process_published(self, batches: Iterable, cfg: ScoringConfig, now: float,
                          tolerance: int = DEFAULT_TOLERANCE) -> ExposureOutcome:
        published: list[PublishedTEK] = []
        seen: set[bytes] = set()
        own = {t.key for t in self.teks.values()}
        for batch in batches:
            for entry in getattr(batch, "entries", [batch]):
                k = entry.tek.key
                if k not in seen and k not in own:
                    seen.add(k)
                    published.append(entry)

        matches = match_keys(published, self.contacts, tolerance)
        by_onset: dict[int | None, list[MatchEvent]] = {}
        for m in matches:
            entry = published[m.tek_index]
            c = m.contact
            if c.tx_power is None and c.aem:
                aemk = derive_aemk(entry.tek)
                c.tx_power = float(decode_metadata(decrypt_aem(aemk, c.rpi, c.aem)))
            by_onset.setdefault(entry.onset_day, []).append(m)
        score = sum(exposure_score(ms, onset, cfg) for onset, ms in by_onset.items())
        notified = score >= cfg.notify_threshold
        if notified:
            self.status.record_exposure(now)
            log.info("%s notified (score %.2f)", self.user_id, score)
        return ExposureOutcome(score, notified, len(matches), self.status.state(now))

    def apply_test_result(self, result: str, t: float, one_time_code: str | None = None) -> StatusCard:
        self.status.record_test(result, t)
        self.upload_code = one_time_code if result == "positive" else None
        return self.status

    def upload_request(self, now: float) -> tuple[list[TemporaryExposureKey], str]:
        """TEK history and code to send after a positive result."""
        if self.upload_code is None:
            raise RuntimeError("no positive result with an upload code")
        return self.tek_history(now), self.upload_code

    # -- device transfer ----------------------------------------------------

    def export_state(self, passphrase: str) -> str:
        return export_state(self, passphrase)

    def restore(self, bundle: str, passphrase: str) -> None:
        """Replace this agent's state from ``bundle``; untouched on failure."""
        other = import_state(bundle, passphrase)
        rng = self.rng
        self.__dict__.update(other.__dict__)
        self.rng = rng

    def snapshot(self) -> dict:
        return {
            "user_id": self.user_id,
            "tx_power": self.tx_power,
            "scan_window": self.scan_window,
            "teks": dict(self.teks),
            "contacts": [vars(c).copy() for c in self.contacts],
            "events": list(self.status.events),
            "validity_days": self.status.validity_days,
        }


_BUNDLE_MAGIC = b"EKB1"
_STATE_MAGIC = b"EKST"
_STATE_VERSION = 1
_SEC_META, _SEC_KEYS, _SEC_CONTACTS, _SEC_STATUS = 1, 2, 3, 4
_EVENT_CODES = {"negative": 0, "positive": 1, "exposure": 2}
_EVENT_NAMES = {v: k for k, v in _EVENT_CODES.items()}
_CONTACT = struct.Struct("<16sddddddIib")


def _kdf(passphrase: str, salt: bytes) -> bytes:
    if not passphrase:
        raise ValueError("passphrase must be non-empty")
    return Scrypt(salt=salt, length=32, n=2**14, r=8, p=1).derive(passphrase.encode())


def _section(tag: int, payload: bytes) -> bytes:
    return struct.pack("<BI", tag, len(payload)) + payload


def _encode_state(agent: DeviceAgent) -> bytes:
    uid = agent.user_id.encode()
    meta = struct.pack("<H", len(uid)) + uid + struct.pack(
        "<bdd", agent.tx_power, agent.scan_window, agent.status.validity_days)
    keys = struct.pack("<H", len(agent.teks)) + b"".join(
        t.key + struct.pack("<I", t.valid_from) for _, t in sorted(agent.teks.items()))
    parts = [struct.pack("<I", len(agent.contacts))]
    for c in agent.contacts:
        has_tx = c.tx_power is not None
        parts.append(_CONTACT.pack(c.rpi, c.first_seen, c.last_seen, c.duration, c.min_rssi,
                                   c.max_rssi, c.mean_rssi, c.sightings, c.coarse_day, has_tx))
        parts.append(struct.pack("<dB", c.tx_power if has_tx else math.nan, len(c.aem)) + c.aem)
    status = struct.pack("<I", len(agent.status.events)) + b"".join(
        struct.pack("<Bd", _EVENT_CODES[k], t) for k, t in agent.status.events)
    return (_STATE_MAGIC + bytes([_STATE_VERSION]) + _section(_SEC_META, meta)
            + _section(_SEC_KEYS, keys) + _section(_SEC_CONTACTS, b"".join(parts))
            + _section(_SEC_STATUS, status))


def _decode_state(data: bytes) -> DeviceAgent:
    if data[:4] != _STATE_MAGIC or data[4] != _STATE_VERSION:
        raise BundleError("unsupported state version")
    sections: dict[int, bytes] = {}
    off = 5
    while off < len(data):
        tag, n = struct.unpack_from("<BI", data, off)
        off += 5
        sections[tag] = data[off:off + n]
        off += n
    meta = sections[_SEC_META]
    (ulen,) = struct.unpack_from("<H", meta)
    user_id = meta[2:2 + ulen].decode()
    tx_power, scan_window, validity = struct.unpack_from("<bdd", meta, 2 + ulen)
    agent = DeviceAgent(user_id, tx_power=tx_power, scan_window=scan_window, validity_days=validity)

    keys = sections[_SEC_KEYS]
    (nk,) = struct.unpack_from("<H", keys)
    for k in range(nk):
        base = 2 + 20 * k
        tek = TemporaryExposureKey(keys[base:base + 16], struct.unpack_from("<I", keys, base + 16)[0])
        agent.teks[tek.day] = tek

    body = sections[_SEC_CONTACTS]
    (nc,) = struct.unpack_from("<I", body)
    off = 4
    for _ in range(nc):
        (rpi, first, last, dur, mn, mx, mean, sightings, cday, has_tx) = _CONTACT.unpack_from(body, off)
        off += _CONTACT.size
        tx, alen = struct.unpack_from("<dB", body, off)
        off += 9
        aem = body[off:off + alen]
        off += alen
        rec = ContactRecord(rpi, first, last, dur, mn, mx, mean, sightings, cday, aem,
                            tx if has_tx else None)
        agent.contacts.append(rec)
        agent._open[rpi] = rec

    status = sections[_SEC_STATUS]
    (ne,) = struct.unpack_from("<I", status)
    events = [struct.unpack_from("<Bd", status, 4 + 9 * k) for k in range(ne)]
    agent.status = StatusCard.from_events([(_EVENT_NAMES[c], t) for c, t in events], validity)
    return agent


def export_state(agent: DeviceAgent, passphrase: str) -> str:
    """Encrypt the agent's keys, contacts and status into a base64url bundle."""
    salt, nonce = os.urandom(16), os.urandom(12)
    key = _kdf(passphrase, salt)
    header = _BUNDLE_MAGIC + salt + nonce
    ct = AESGCM(key).encrypt(nonce, _encode_state(agent), header)
    return b64u_encode(header + ct)


def import_state(bundle: str, passphrase: str) -> DeviceAgent:
    try:
        raw = b64u_decode(bundle)
    except ValueError as exc:
        raise BundleError("bundle is not valid base64url") from exc
    if len(raw) < 4 + 16 + 12 + 16 or raw[:4] != _BUNDLE_MAGIC:
        raise BundleError("not a state bundle")
    salt, nonce = raw[4:20], raw[20:32]
    try:
        plain = AESGCM(_kdf(passphrase, salt)).decrypt(nonce, raw[32:], raw[:32])
    except InvalidTag as exc:
        raise BundleError("bundle authentication failed") from exc
    try:
        return _decode_state(plain)
    except (struct.error, KeyError, UnicodeDecodeError, IndexError) as exc:
        raise BundleError("malformed state payload") from exc
