"""Signed heatmap reports and the checks an outside auditor runs on them."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .._codec import b64u_decode, b64u_encode
from .logs import GridConfig
from .platform import AttestationReport, verify_attestation

REPORT_DOMAIN = b"EK-HEATMAP-1\0"


class ReportFormatError(ValueError):
    pass


@dataclass(frozen=True)
class HeatmapReport:
    day: int
    grid_config: GridConfig
    grid: tuple[tuple[int, ...], ...]
    included_digests: tuple[bytes, ...]
    counter_value: int
    measurement: bytes
    signature: bytes = b""

    def body(self) -> dict:
        return {
            "day": self.day,
            "grid_config": self.grid_config.to_dict(),
            "grid": [list(row) for row in self.grid],
            "included_digests": [d.hex() for d in self.included_digests],
            "counter_value": self.counter_value,
            "measurement": self.measurement.hex(),
        }

    def signed_bytes(self) -> bytes:
        return REPORT_DOMAIN + json.dumps(self.body(), sort_keys=True, separators=(",", ":")).encode()

    def signed_by(self, key: Ed25519PrivateKey) -> "HeatmapReport":
        return replace(self, signature=key.sign(self.signed_bytes()))

    def total(self) -> int:
        return sum(map(sum, self.grid))

    def to_dict(self) -> dict:
        return {**self.body(), "signature": b64u_encode(self.signature)}

    @classmethod
    def from_dict(cls, d: dict) -> "HeatmapReport":
        try:
            return cls(
                day=int(d["day"]),
                grid_config=GridConfig.from_dict(d["grid_config"]),
                grid=tuple(tuple(int(v) for v in row) for row in d["grid"]),
                included_digests=tuple(bytes.fromhex(h) for h in d["included_digests"]),
                counter_value=int(d["counter_value"]),
                measurement=bytes.fromhex(d["measurement"]),
                signature=b64u_decode(d["signature"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ReportFormatError(f"malformed report: {exc}") from exc


def _well_formed(report: HeatmapReport) -> bool:
    cfg = report.grid_config
    if len(report.grid) != cfg.rows or any(len(r) != cfg.cols for r in report.grid):
        return False
    if any(v < 0 for row in report.grid for v in row) or report.counter_value < 0:
        return False
    ds = report.included_digests
    return all(len(d) == 32 for d in ds) and all(a < b for a, b in zip(ds, ds[1:]))


def verify_report(report: HeatmapReport, attestation: AttestationReport,
                  root_public_key: bytes, expected_measurement: bytes) -> bool:
    """Check the chain platform root -> enclave key -> report, plus shape invariants."""
    if not verify_attestation(attestation, root_public_key, expected_measurement):
        return False
    if report.measurement != attestation.measurement or not _well_formed(report):
        return False
    try:
        Ed25519PublicKey.from_public_bytes(attestation.enclave_public_key).verify(
            report.signature, report.signed_bytes())
    except (InvalidSignature, ValueError):
        return False
    return True


def verify_inclusion(report: HeatmapReport, digest: bytes) -> bool:
    ds = report.included_digests
    i = bisect.bisect_left(ds, digest)
    return i < len(ds) and ds[i] == digest


def check_counter_sequence(reports: Iterable[HeatmapReport]) -> bool:
    values = [r.counter_value for r in reports]
    return all(a < b for a, b in zip(values, values[1:]))


@dataclass
class AuditVerdict:
    signature_valid: bool
    included: bool | None = None
    participants: int = 0
    isolation_suspected: bool = False
    reasons: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.signature_valid and self.included is not False and not self.isolation_suspected

    def to_dict(self) -> dict:
        return {"passed": self.passed, "signature_valid": self.signature_valid,
                "included": self.included, "participants": self.participants,
                "isolation_suspected": self.isolation_suspected, "reasons": self.reasons}


def audit(report: HeatmapReport, attestation: AttestationReport, root_public_key: bytes,
          expected_measurement: bytes, digest: bytes | None = None,
          min_participants: int = 2) -> AuditVerdict:
    """Full verdict for one report.

    A user whose receipt is missing from a report covering their day has
    evidence that the map was computed over someone else's data only, which is
    what an isolation attack looks like from the outside. Reports built from
    fewer than ``min_participants`` logs are flagged for the same reason.
    """
    v = AuditVerdict(verify_report(report, attestation, root_public_key, expected_measurement),
                     participants=len(report.included_digests))
    if not v.signature_valid:
        v.reasons.append("report signature or attestation chain invalid")
    if digest is not None:
        v.included = verify_inclusion(report, digest)
        if not v.included:
            v.isolation_suspected = True
            v.reasons.append("digest not included in report")
    if 0 < v.participants < min_participants:
        v.isolation_suspected = True
        v.reasons.append(f"report covers only {v.participants} log(s)")
    return v


def save_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_report(path: str | Path) -> HeatmapReport:
    try:
        return HeatmapReport.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ReportFormatError(f"{path}: not JSON: {exc}") from exc


def load_attestation(path: str | Path) -> AttestationReport:
    try:
        return AttestationReport.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ReportFormatError(f"{path}: not JSON: {exc}") from exc


def grid_to_csv(grid: Sequence[Sequence[int]]) -> str:
    return "".join(",".join(str(v) for v in row) + "\n" for row in grid)


def grid_to_pgm(grid: Sequence[Sequence[int]]) -> str:
    """Plain (P2) graymap, row 0 at the bottom so north is up."""
    rows, cols = len(grid), len(grid[0]) if grid else 0
    peak = max((v for row in grid for v in row), default=0) or 1
    lines = [f"P2\n{cols} {rows}\n{min(peak, 65535)}"]
    for row in reversed(grid):
        lines.append(" ".join(str(min(v, 65535)) for v in row))
    return "\n".join(lines) + "\n"
