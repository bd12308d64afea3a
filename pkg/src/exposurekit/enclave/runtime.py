"""The exposure-map building block running inside the simulated enclave.

State directory layout::

    logs/<log_id hex>.sealed   one sealed canonical log per upload
    index.sealed               sealed map log_id -> days covered, digest
    consumption.sealed         sealed {counter, consumed[day] -> [log_id]}
    reports/report-N.json      signed heatmap report, N = counter value
    reports/attestation-N.json attestation of the instance that signed it

Nothing outside the sealed blobs carries point coordinates.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .counter import CounterService
from .logs import GridConfig, LocationLog, LogFormatError, decrypt_upload
from .platform import AttestationReport, Platform, SealedBlob, SealingError, measure
from .report import HeatmapReport, save_json


class IngestRejected(ValueError):
    pass


class RollbackDetected(Exception):
    pass


@dataclass(frozen=True)
class Receipt:
    log_id: bytes
    digest: bytes

    def to_dict(self) -> dict:
        return {"log_id": self.log_id.hex(), "digest": self.digest.hex()}


@dataclass
class RuntimeStats:
    decrypt_ops: int = 0
    last_run_decrypts: int = 0


def _raw(pub) -> bytes:
    return pub.public_bytes(Encoding.Raw, PublicFormat.Raw)


class EnclaveRuntime:
    def __init__(self, platform: Platform, bundle: bytes, counter: CounterService,
                 state_dir: str | os.PathLike | None = None):
        self.platform = platform
        self.measurement = measure(bundle)
        self.enclave_id = self.measurement.hex()
        self.counter = counter
        self.state_dir = Path(state_dir) if state_dir is not None else Path(tempfile.mkdtemp(prefix="ek-enclave-"))
        (self.state_dir / "logs").mkdir(parents=True, exist_ok=True)
        (self.state_dir / "reports").mkdir(exist_ok=True)
        self._signing_key = Ed25519PrivateKey.generate()
        self._ingest_key = X25519PrivateKey.generate()
        self._ingest_lock = threading.Lock()
        self._run_lock = threading.Lock()
        self.stats = RuntimeStats()
        self._index: dict[str, dict] = self._unseal_json("index.sealed", {})
        self.attestation = self.attest(os.urandom(16))

    # sealing

    def seal(self, data: bytes) -> SealedBlob:
        return self.platform.seal(self.measurement, data)

    def unseal(self, blob: SealedBlob | bytes) -> bytes:
        if isinstance(blob, (bytes, bytearray)):
            blob = SealedBlob.from_bytes(bytes(blob))
        return self.platform.unseal(self.measurement, blob)

    def _unseal_json(self, name: str, default):
        path = self.state_dir / name
        if not path.exists():
            return default
        return json.loads(self.unseal(path.read_bytes()))

    def _write_sealed(self, path: Path, data: bytes) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.seal(data).to_bytes())
        os.replace(tmp, path)

    # attestation

    @property
    def enclave_public_key(self) -> bytes:
        return _raw(self._signing_key.public_key())

    @property
    def encryption_public_key(self) -> bytes:
        return _raw(self._ingest_key.public_key())

    def attest(self, nonce: bytes) -> AttestationReport:
        if len(nonce) != 16:
            raise ValueError("attestation nonce must be 16 bytes")
        return self.platform.quote(self.measurement, self.enclave_public_key,
                                   self.encryption_public_key, nonce)

    # ingest

    def ingest_log(self, payload: bytes) -> Receipt:
        try:
            plain = decrypt_upload(self._ingest_key, self.measurement, payload)
            log = LocationLog.from_canonical(plain)
        except LogFormatError as exc:
            raise IngestRejected(str(exc)) from exc
        key = log.log_id.hex()
        with self._ingest_lock:
            if key in self._index:
                raise IngestRejected("duplicate log_id")
            self._write_sealed(self.state_dir / "logs" / f"{key}.sealed", plain)
            self._index[key] = {"days": sorted(log.days())}
            self._write_sealed(self.state_dir / "index.sealed",
                               json.dumps(self._index, sort_keys=True).encode())
        return Receipt(log.log_id, log.digest)

    def stored_log_ids(self, day: int | None = None) -> list[str]:
        with self._ingest_lock:
            return sorted(k for k, v in self._index.items() if day is None or day in v["days"])

    # exposure map

    def _load_consumption(self) -> dict:
        try:
            return self._unseal_json("consumption.sealed", {"counter": 0, "consumed": {}})
        except SealingError as exc:
            raise RollbackDetected(f"consumption state unreadable: {exc}") from exc

    def run_exposure_map(self, day: int, grid_config: GridConfig) -> HeatmapReport:
        """Aggregate every not-yet-consumed log for ``day`` into one signed report.

        Raises RollbackDetected if the sealed consumption state does not match
        the external counter, and lets CounterUnavailable propagate so the
        building block refuses to run without it.
        """
        with self._run_lock:
            state = self._load_consumption()
            current = self.counter.peek(self.enclave_id)
            if current != state["counter"]:
                raise RollbackDetected(
                    f"sealed state at counter {state['counter']}, service at {current}")
            consumed = set(state["consumed"].get(str(day), ()))

            cfg = grid_config
            rows, cols, cell = cfg.rows, cfg.cols, cfg.cell_micro
            lat0, lon0 = cfg.origin_lat_micro, cfg.origin_lon_micro
            flat = [0] * (rows * cols)
            included: list[bytes] = []
            newly: list[str] = []
            decrypts = 0
            for key in self.stored_log_ids(day):
                raw = self.unseal((self.state_dir / "logs" / f"{key}.sealed").read_bytes())
                decrypts += 1
                log = LocationLog.from_canonical(raw)
                fresh = int(key not in consumed)
                # every point of every log for the day takes the same path;
                # masks decide the contribution instead of branches
                for lat_u, lon_u, t in log.quantized_points():
                    r = (lat_u - lat0) // cell
                    c = (lon_u - lon0) // cell
                    inside = int(0 <= r < rows) & int(0 <= c < cols) & int(t // 86400 == day)
                    idx = (min(max(r, 0), rows - 1) * cols + min(max(c, 0), cols - 1))
                    flat[idx] += fresh & inside
                if fresh:
                    included.append(log.digest)
                    newly.append(key)
            if cfg.min_count:
                flat = [v if v >= cfg.min_count else 0 for v in flat]

            new_state = {"counter": state["counter"] + 1,
                         "consumed": {**state["consumed"], str(day): sorted(consumed | set(newly))}}
            path = self.state_dir / "consumption.sealed"
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(self.seal(json.dumps(new_state, sort_keys=True).encode()).to_bytes())
            value = self.counter.increment_and_get(self.enclave_id)
            if value != new_state["counter"]:
                tmp.unlink(missing_ok=True)
                raise RollbackDetected(f"counter moved concurrently to {value}")
            os.replace(tmp, path)

            self.stats.decrypt_ops += decrypts
            self.stats.last_run_decrypts = decrypts
            report = HeatmapReport(
                day=day, grid_config=cfg,
                grid=tuple(tuple(flat[r * cols:(r + 1) * cols]) for r in range(rows)),
                included_digests=tuple(sorted(included)),
                counter_value=value, measurement=self.measurement,
            ).signed_by(self._signing_key)
            save_json(self.state_dir / "reports" / f"report-{value}.json", report.to_dict())
            save_json(self.state_dir / "reports" / f"attestation-{value}.json", self.attestation.to_dict())
            return report


def init_enclave(bundle: bytes, platform: Platform | bytes, counter: CounterService | None = None,
                 state_dir: str | os.PathLike | None = None) -> tuple[EnclaveRuntime, AttestationReport]:
    if not isinstance(platform, Platform):
        platform = Platform(platform)
    runtime = EnclaveRuntime(platform, bundle, counter or CounterService(), state_dir)
    return runtime, runtime.attestation
