"""HTTP surface of the exposure-map enclave host."""

from __future__ import annotations

import hmac
import json
import os
import re

from .._codec import b64u_decode, b64u_encode
from .._http import ApiError, JsonApp, Request, call
from .counter import CounterUnavailable
from .logs import GridConfig
from .platform import AttestationReport
from .report import HeatmapReport, ReportFormatError, audit
from .runtime import EnclaveRuntime, IngestRejected, Receipt, RollbackDetected

_REPORT_FILE = re.compile(r"report-(\d+)\.json$")


def build_app(runtime: EnclaveRuntime, root_public_key: bytes, operator_token: str | None = None) -> JsonApp:
    app = JsonApp()
    reports_dir = runtime.state_dir / "reports"

    @app.route("GET", r"/v1/attestation")
    def attestation(req: Request):
        nonce = req.arg("nonce")
        try:
            report = runtime.attest(b64u_decode(nonce)) if nonce else runtime.attestation
        except ValueError as exc:
            raise ApiError(400, f"bad nonce: {exc}") from exc
        return 200, {"attestation": report.to_dict(), "root_public_key": b64u_encode(root_public_key)}

    @app.route("POST", r"/v1/logs")
    def ingest(req: Request):
        body = req.json()
        if not isinstance(body, dict) or not isinstance(body.get("payload"), str):
            raise ApiError(400, "expected {payload}")
        try:
            receipt = runtime.ingest_log(b64u_decode(body["payload"]))
        except (IngestRejected, ValueError) as exc:
            raise ApiError(400, f"rejected: {exc}") from exc
        return 201, receipt.to_dict()

    @app.route("POST", r"/v1/maps")
    def run_map(req: Request):
        if operator_token is None or not hmac.compare_digest(req.bearer(), operator_token):
            raise ApiError(403, "operator credential required")
        body = req.json()
        try:
            day = int(body["day"])
            cfg = GridConfig.from_dict(body["grid"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ApiError(400, f"expected {{day, grid}}: {exc}") from exc
        try:
            report = runtime.run_exposure_map(day, cfg)
        except RollbackDetected as exc:
            raise ApiError(409, f"rollback detected: {exc}") from exc
        except CounterUnavailable as exc:
            raise ApiError(503, str(exc)) from exc
        return 201, report.to_dict()

    @app.route("GET", r"/v1/reports")
    def list_reports(req: Request):
        found = sorted(int(m.group(1)) for p in reports_dir.iterdir() if (m := _REPORT_FILE.match(p.name)))
        return 200, {"reports": found}

    @app.route("GET", r"/v1/reports/(?P<n>\d+)")
    def get_report(req: Request):
        n = int(req.params["n"])
        path, att = reports_dir / f"report-{n}.json", reports_dir / f"attestation-{n}.json"
        if not path.exists():
            raise ApiError(404, "no such report")
        return 200, {"report": json.loads(path.read_text()), "attestation": json.loads(att.read_text())}

    @app.route("POST", r"/v1/audit")
    def do_audit(req: Request):
        body = req.json()
        try:
            report = HeatmapReport.from_dict(body["report"])
            att = AttestationReport.from_dict(body["attestation"])
            digest = bytes.fromhex(body["digest"]) if body.get("digest") else None
        except (KeyError, TypeError, ValueError, ReportFormatError) as exc:
            raise ApiError(400, f"unparseable audit request: {exc}") from exc
        verdict = audit(report, att, root_public_key, runtime.measurement, digest)
        return 200, verdict.to_dict()

    return app


class EnclaveClient:
    def __init__(self, base_url: str):
        self.base_url = base_url

    def attestation(self, nonce: bytes | None = None) -> tuple[AttestationReport, bytes]:
        nonce = nonce or os.urandom(16)
        status, body = call(self.base_url, "GET", f"/v1/attestation?nonce={b64u_encode(nonce)}")
        if status != 200:
            raise RuntimeError(f"attestation fetch failed: {status} {body}")
        return AttestationReport.from_dict(body["attestation"]), b64u_decode(body["root_public_key"])

    def upload(self, payload: bytes) -> tuple[int, dict]:
        return call(self.base_url, "POST", "/v1/logs", {"payload": b64u_encode(payload)})

    def receipt(self, payload: bytes) -> Receipt:
        status, body = self.upload(payload)
        if status != 201:
            raise IngestRejected(body.get("error", str(status)))
        return Receipt(bytes.fromhex(body["log_id"]), bytes.fromhex(body["digest"]))

    def run_map(self, day: int, grid: GridConfig, token: str) -> tuple[int, dict]:
        return call(self.base_url, "POST", "/v1/maps", {"day": day, "grid": grid.to_dict()}, token)

    def report(self, n: int) -> tuple[HeatmapReport, AttestationReport]:
        status, body = call(self.base_url, "GET", f"/v1/reports/{n}")
        if status != 200:
            raise RuntimeError(f"report fetch failed: {status} {body}")
        return HeatmapReport.from_dict(body["report"]), AttestationReport.from_dict(body["attestation"])
