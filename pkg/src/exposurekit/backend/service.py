"""Diagnosis key server: one-time codes, TEK publication, scoring config.

All mutations go through one lock and are journaled to an append-only JSON
lines file when a state directory is given; restarting replays the journal.
The server never sees RPIs, contact records or user identities.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .._codec import b64u_decode, b64u_encode
from ..device import ScoringConfig
from ..protocol import (
    INTERVALS_PER_DAY,
    TEK_RETENTION_DAYS,
    PublishedTEK,
    TemporaryExposureKey,
    day_index,
    interval_number,
)

log = logging.getLogger(__name__)

CODE_ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"  # Crockford base32
CODE_LENGTH = 8
CODE_TTL_SECONDS = 24 * 3600
MAX_UPLOAD_KEYS = TEK_RETENTION_DAYS
JOURNAL = "journal.jsonl"


class AuthorizationError(Exception):
    pass


class CodeRejected(Exception):
    """Upload refused because the code is unknown, redeemed or expired."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class OneTimeCode:
    code: str
    issued_to: str
    issued_at: float
    redeemed: bool = False

    def expired(self, now: float) -> bool:
        return now >= self.issued_at + CODE_TTL_SECONDS


@dataclass(frozen=True)
class PublishedTEKBatch:
    batch_id: int
    entries: tuple[PublishedTEK, ...]
    published_at: float


def _token_digest(token: str) -> str:
    return hashlib.sha256(token.encode()).hexdigest()


class DiagnosisServer:
    def __init__(self, state_dir: str | os.PathLike | None = None,
                 clock: Callable[[], float] = time.time,
                 rng: secrets.SystemRandom | None = None,
                 admin_token: str | None = None,
                 sites: dict[str, str] | None = None):
        self.clock = clock
        self._rng = rng or secrets.SystemRandom()
        self._lock = threading.Lock()
        self._sites: dict[str, str] = {}
        self._admin = _token_digest(admin_token) if admin_token else None
        self._codes: dict[str, OneTimeCode] = {}
        self._batches: dict[int, list[PublishedTEK]] = {}
        self._published_at: dict[int, float] = {}
        self._known_keys: set[bytes] = set()
        self._config_version = 0
        self._config = ScoringConfig()
        self._journal: Path | None = None
        for site, token in (sites or {}).items():
            self._sites[site] = _token_digest(token)
        if state_dir is not None:
            Path(state_dir).mkdir(parents=True, exist_ok=True)
            self._journal = Path(state_dir) / JOURNAL
            self._replay()

    # -- persistence --------------------------------------------------------

    def _append(self, record: dict) -> None:
        if self._journal is None:
            return
        with open(self._journal, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _replay(self) -> None:
        if not self._journal.exists():
            return
        with open(self._journal, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._apply(json.loads(line))

    def _apply(self, rec: dict) -> None:
        kind = rec["type"]
        if kind == "site":
            self._sites[rec["site_id"]] = rec["token_sha256"]
        elif kind == "code":
            self._codes[rec["code"]] = OneTimeCode(rec["code"], rec["site_id"], rec["issued_at"])
        elif kind == "redeem":
            c = self._codes[rec["code"]]
            self._codes[c.code] = OneTimeCode(c.code, c.issued_to, c.issued_at, True)
        elif kind == "publish":
            for e in rec["teks"]:
                tek = TemporaryExposureKey(b64u_decode(e["key"]), e["valid_from"])
                self._add_entry(rec["batch_id"], PublishedTEK(tek, e["report_time"], e.get("onset_day")))
            self._published_at[rec["batch_id"]] = rec["published_at"]
        elif kind == "config":
            self._config = ScoringConfig.from_dict(rec["config"])
            self._config_version = rec["version"]
        else:
            raise ValueError(f"unknown journal record {kind!r}")

    def _add_entry(self, batch_id: int, entry: PublishedTEK) -> bool:
        if entry.tek.key in self._known_keys:
            return False
        self._known_keys.add(entry.tek.key)
        self._batches.setdefault(batch_id, []).append(entry)
        return True

    # -- sites and codes ----------------------------------------------------

    def register_site(self, site_id: str, token: str) -> None:
        with self._lock:
            rec = {"type": "site", "site_id": site_id, "token_sha256": _token_digest(token)}
            self._append(rec)
            self._apply(rec)

    def authenticate_site(self, site_id: str, token: str) -> None:
        expected = self._sites.get(site_id)
        if expected is None or not hmac.compare_digest(expected, _token_digest(token)):
            raise AuthorizationError(f"site {site_id!r} not authorized")

    def issue_code(self, site_id: str) -> OneTimeCode:
        with self._lock:
            if site_id not in self._sites:
                raise AuthorizationError(f"unknown test site {site_id!r}")
            while True:
                code = "".join(self._rng.choice(CODE_ALPHABET) for _ in range(CODE_LENGTH))
                if code not in self._codes:
                    break
            rec = {"type": "code", "code": code, "site_id": site_id, "issued_at": self.clock()}
            self._append(rec)
            self._apply(rec)
            return self._codes[code]

    def code_status(self, code: str) -> OneTimeCode | None:
        return self._codes.get(code)

    # -- uploads and downloads ----------------------------------------------

    def upload_teks(self, teks: Iterable[TemporaryExposureKey], code: str,
                    onset_day: int | None = None) -> list[int]:
        """Redeem ``code`` and publish ``teks``; returns the batch ids touched."""
        teks = list(teks)
        if not 1 <= len(teks) <= MAX_UPLOAD_KEYS:
            raise ValueError(f"upload must carry 1-{MAX_UPLOAD_KEYS} keys, got {len(teks)}")
        with self._lock:
            now = self.clock()
            report_time = interval_number(now)
            for tek in teks:
                if tek.valid_from > report_time:
                    raise ValueError("key from the future")
            entry = self._codes.get(code)
            if entry is None:
                raise CodeRejected("unknown")
            if entry.redeemed:
                raise CodeRejected("redeemed")
            if entry.expired(now):
                raise CodeRejected("expired")

            batch_id = day_index(now)
            fresh = [t for t in dict((t.key, t) for t in teks).values() if t.key not in self._known_keys]
            self._append({"type": "redeem", "code": code})
            self._apply({"type": "redeem", "code": code})
            rec = {
                "type": "publish",
                "batch_id": batch_id,
                "published_at": now,
                "teks": [{"key": b64u_encode(t.key), "valid_from": t.valid_from,
                          "report_time": report_time, "onset_day": onset_day} for t in fresh],
            }
            self._append(rec)
            self._apply(rec)
            log.info("code %s redeemed, %d keys into batch %d", code, len(fresh), batch_id)
            return [batch_id]

    def download_batches(self, since: int = 0) -> list[PublishedTEKBatch]:
        with self._lock:
            return [PublishedTEKBatch(b, tuple(self._batches[b]), self._published_at[b])
                    for b in sorted(self._batches) if b >= since]

    # -- admin --------------------------------------------------------------

    def admin_set_scoring_config(self, cfg: ScoringConfig | dict, admin_credential: str) -> int:
        if self._admin is None or not hmac.compare_digest(self._admin, _token_digest(admin_credential)):
            raise AuthorizationError("bad admin credential")
        if not isinstance(cfg, ScoringConfig):
            cfg = ScoringConfig.from_dict(cfg)
        with self._lock:
            rec = {"type": "config", "version": self._config_version + 1, "config": cfg.to_dict()}
            self._append(rec)
            self._apply(rec)
            return self._config_version

    def scoring_config(self) -> tuple[int, ScoringConfig]:
        with self._lock:
            return self._config_version, self._config


def batch_to_wire(batch: PublishedTEKBatch) -> dict:
    return {
        "batch_id": batch.batch_id,
        "published_at": batch.published_at,
        "teks": [{"key": b64u_encode(e.tek.key), "valid_from": e.tek.valid_from,
                  "report_time": e.report_time, "onset_day": e.onset_day} for e in batch.entries],
    }


def batch_from_wire(data: dict) -> PublishedTEKBatch:
    entries = tuple(
        PublishedTEK(TemporaryExposureKey(b64u_decode(e["key"]), int(e["valid_from"])),
                     int(e["report_time"]), e.get("onset_day"))
        for e in data["teks"])
    return PublishedTEKBatch(int(data["batch_id"]), entries, float(data["published_at"]))


def tek_to_wire(tek: TemporaryExposureKey) -> dict:
    return {"key": b64u_encode(tek.key), "valid_from": tek.valid_from}


def tek_from_wire(data: dict) -> TemporaryExposureKey:
    if int(data["valid_from"]) % INTERVALS_PER_DAY:
        raise ValueError("valid_from must be day-aligned")
    return TemporaryExposureKey(b64u_decode(data["key"]), int(data["valid_from"]))
