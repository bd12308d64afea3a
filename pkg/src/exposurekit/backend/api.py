"""HTTP surface of the diagnosis server. Schemas are listed in docs/wire-formats.md."""

from __future__ import annotations

from typing import Iterable

from .._http import ApiError, JsonApp, Request, call
from ..device import ScoringConfig
from ..protocol import TemporaryExposureKey
from .service import (
    CODE_TTL_SECONDS,
    AuthorizationError,
    CodeRejected,
    DiagnosisServer,
    PublishedTEKBatch,
    batch_from_wire,
    batch_to_wire,
    tek_from_wire,
    tek_to_wire,
)


def build_app(server: DiagnosisServer) -> JsonApp:
    app = JsonApp()

    @app.route("POST", r"/v1/sites/(?P<site>[\w.-]+)/codes")
    def issue(req: Request):
        site = req.params["site"]
        try:
            server.authenticate_site(site, req.bearer())
            code = server.issue_code(site)
        except AuthorizationError as exc:
            raise ApiError(403, str(exc)) from exc
        return 201, {"code": code.code, "issued_to": code.issued_to, "issued_at": code.issued_at,
                     "expires_at": code.issued_at + CODE_TTL_SECONDS}

    @app.route("POST", r"/v1/diagnosis-keys")
    def upload(req: Request):
        body = req.json()
        if not isinstance(body, dict) or not isinstance(body.get("teks"), list) \
                or not isinstance(body.get("code"), str):
            raise ApiError(400, "expected {code, teks[]}")
        onset = body.get("onset_day")
        if onset is not None and not isinstance(onset, int):
            raise ApiError(400, "onset_day must be an integer")
        try:
            teks = [tek_from_wire(t) for t in body["teks"]]
            batches = server.upload_teks(teks, body["code"], onset_day=onset)
        except CodeRejected as exc:
            return 403, {"error": "code rejected", "reason": exc.reason}
        except (KeyError, TypeError, ValueError) as exc:
            raise ApiError(400, f"invalid upload: {exc}") from exc
        return 200, {"batches": batches}

    @app.route("GET", r"/v1/diagnosis-keys")
    def download(req: Request):
        try:
            since = int(req.arg("since", "0"))
        except ValueError as exc:
            raise ApiError(400, "since must be an integer") from exc
        return 200, {"batches": [batch_to_wire(b) for b in server.download_batches(since)]}

    @app.route("PUT", r"/v1/admin/scoring-config")
    def set_config(req: Request):
        try:
            version = server.admin_set_scoring_config(req.json(), req.bearer())
        except AuthorizationError as exc:
            raise ApiError(403, str(exc)) from exc
        except (TypeError, ValueError) as exc:
            raise ApiError(400, f"invalid config: {exc}") from exc
        return 200, {"version": version}

    @app.route("GET", r"/v1/scoring-config")
    def get_config(req: Request):
        version, cfg = server.scoring_config()
        return 200, {"version": version, "config": cfg.to_dict()}

    return app


class BackendClient:
    """Thin HTTP client used by devices and test sites."""

    def __init__(self, base_url: str):
        self.base_url = base_url

    def issue_code(self, site_id: str, token: str) -> str:
        status, body = call(self.base_url, "POST", f"/v1/sites/{site_id}/codes", {}, token)
        if status != 201:
            raise AuthorizationError(body.get("error", str(status)))
        return body["code"]

    def upload(self, teks: Iterable[TemporaryExposureKey], code: str,
               onset_day: int | None = None) -> tuple[int, dict]:
        payload = {"code": code, "teks": [tek_to_wire(t) for t in teks]}
        if onset_day is not None:
            payload["onset_day"] = onset_day
        return call(self.base_url, "POST", "/v1/diagnosis-keys", payload)

    def download(self, since: int = 0) -> list[PublishedTEKBatch]:
        status, body = call(self.base_url, "GET", f"/v1/diagnosis-keys?since={since}")
        if status != 200:
            raise RuntimeError(f"download failed: {status} {body}")
        return [batch_from_wire(b) for b in body["batches"]]

    def scoring_config(self) -> tuple[int, ScoringConfig]:
        _, body = call(self.base_url, "GET", "/v1/scoring-config")
        return body["version"], ScoringConfig.from_dict(body["config"])

    def set_scoring_config(self, cfg: ScoringConfig, token: str) -> tuple[int, dict]:
        return call(self.base_url, "PUT", "/v1/admin/scoring-config", cfg.to_dict(), token)
