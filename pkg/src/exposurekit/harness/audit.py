"""Offline audit of published heatmap artifacts."""

from __future__ import annotations

from pathlib import Path

from .._codec import b64u_decode
from ..enclave.platform import default_bundle, measure
from ..enclave.report import AuditVerdict, ReportFormatError, audit, load_attestation, load_report


def read_root_key(value: str) -> bytes:
    """Accept the platform root key inline (base64url) or as a path to a file holding it."""
    path = Path(value)
    text = path.read_text().strip() if path.is_file() else value.strip()
    try:
        key = b64u_decode(text)
    except ValueError as exc:
        raise ReportFormatError(f"root public key is not base64url: {exc}") from exc
    if len(key) != 32:
        raise ReportFormatError("root public key must be 32 bytes")
    return key


def run_audit(report_path: str | Path, attestation_path: str | Path, root_public_key: bytes,
              expected_measurement: bytes | None = None, digest: bytes | None = None,
              min_participants: int = 2) -> AuditVerdict:
    """Verify one report file against its attestation.

    The expected measurement defaults to the one rebuilt from the locally
    installed enclave sources, which is what an auditor reviewing this source
    tree would compute.
    """
    if expected_measurement is None:
        expected_measurement = measure(default_bundle())
    report = load_report(report_path)
    attestation = load_attestation(attestation_path)
    return audit(report, attestation, root_public_key, expected_measurement, digest, min_participants)
