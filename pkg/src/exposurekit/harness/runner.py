"""In-process end-to-end orchestration: radio world, devices, backend, enclave."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import tempfile
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .. import __version__
from .._codec import b64u_encode
from ..backend import CodeRejected, DiagnosisServer
from ..device import DeviceAgent, ScoringConfig
from ..enclave import (
    CounterService,
    LocationLog,
    Platform,
    default_bundle,
    encrypt_for_enclave,
    init_enclave,
    measure,
    verify_inclusion,
    verify_report,
)
from ..protocol import day_index, interval_number
from ..radio import AttackerAgent, Delivery, Trajectory, World
from .scenario import EnclaveSpec, Scenario, load_scenario

log = logging.getLogger(__name__)

SITE_ID = "testing-site"
METERS_PER_DEG_LAT = 111_320.0


@dataclass
class DeviceResult:
    score: float
    notified: bool
    matches: int
    status: str
    true_score: float
    group: str


@dataclass
class RunMetrics:
    scenario: str
    seed: int
    true_exposures: list[str]
    notified: list[str]
    false_notifications: list[str]
    missed: list[str]
    devices: dict[str, DeviceResult]
    uploads: list[dict]
    enclave_reports: list[dict] = field(default_factory=list)
    expectation_failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.expectation_failures

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class RunDirectoryNotEmpty(Exception):
    pass


class _GroundTruth:
    """Scores contacts by true origin, using only honest deliveries.

    Mirrors the device-side formula (per-interval duration and mean rssi) but
    never looks at identifiers, so replays and relays cannot contribute.
    """

    def __init__(self, infected: set[str], tick: float):
        self.infected = infected
        self.tick = tick
        self._acc: dict[tuple[str, str, int], list[float]] = defaultdict(lambda: [0, 0.0])

    def observe(self, d: Delivery, origin: str, t: float) -> None:
        if origin in self.infected:
            acc = self._acc[(d.device_id, origin, interval_number(t))]
            acc[0] += 1
            acc[1] += d.rssi

    def scores(self, cfg: ScoringConfig, tx_power: dict[str, int],
               onset_day: dict[str, int | None]) -> dict[str, float]:
        out: dict[str, float] = defaultdict(float)
        for (rx, origin, interval), (n, total) in sorted(self._acc.items()):
            minutes = min(n * self.tick / 60.0, cfg.duration_cap_minutes)
            weight = cfg.bucket_weight(tx_power[origin] - total / n)
            onset = onset_day[origin]
            offset = 0 if onset is None else interval // 144 - onset
            out[rx] += minutes * weight * cfg.onset_weights.get(offset, 0.0)
        return out


def _to_latlon(origin: tuple[float, float], x: float, y: float) -> tuple[float, float]:
    lat0, lon0 = origin
    lat = lat0 + y / METERS_PER_DEG_LAT
    lon = lon0 + x / (METERS_PER_DEG_LAT * math.cos(math.radians(lat0)))
    return lat, lon


def _platform_for(seed: int) -> Platform:
    return Platform(hashlib.sha256(f"exposurekit-platform:{seed}".encode()).digest())


def _run_enclave(sc: Scenario, spec: EnclaveSpec, trajectories: dict[str, Trajectory],
                 out: Path) -> list[dict]:
    platform = _platform_for(sc.seed)
    edir = out / "enclave"
    edir.mkdir()
    root = platform.root_public_key()
    (edir / "root_public_key.b64u").write_text(b64u_encode(root) + "\n")
    bundle = default_bundle()
    runtime, attestation = init_enclave(bundle, platform, CounterService(edir / "counter.json"),
                                        edir / "state")
    rng = random.Random(f"{sc.seed}:enclave")
    receipts: dict[str, bytes] = {}
    days: set[int] = set()
    for spec_dev in sc.devices:
        traj = trajectories[spec_dev.device_id]
        points = []
        t = sc.start
        while t < sc.start + sc.duration:
            x, y = traj.at(t)
            points.append((*_to_latlon(spec.origin, x, y), t))
            days.add(day_index(t))
            t += spec.sample_every
        ll = LocationLog.new(spec_dev.device_id, points, log_id=rng.randbytes(16))
        receipt = runtime.ingest_log(encrypt_for_enclave(ll, attestation, root, measure(bundle)))
        receipts[spec_dev.device_id] = receipt.digest

    reports = []
    for day in sorted(days):
        rep = runtime.run_exposure_map(day, spec.grid)
        included = [d for d, dg in sorted(receipts.items()) if verify_inclusion(rep, dg)]
        reports.append({
            "day": day, "counter_value": rep.counter_value, "total_points": rep.total(),
            "participants": len(rep.included_digests), "included_devices": included,
            "verified": verify_report(rep, attestation, root, measure(bundle)),
            "report": f"enclave/state/reports/report-{rep.counter_value}.json",
            "attestation": f"enclave/state/reports/attestation-{rep.counter_value}.json",
        })
    return reports


def run_scenario(scenario: Scenario | str | Path, out_dir: str | Path | None = None) -> RunMetrics:
    """Run one scenario; with ``out_dir`` also write the artifact directory.

    ``out_dir`` must be absent or empty so backend state from an earlier run
    cannot leak in.
    """
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        if out.exists() and any(out.iterdir()):
            raise RunDirectoryNotEmpty(f"{out} is not empty")
        out.mkdir(parents=True, exist_ok=True)

    clock_now = [sc.start]
    server = DiagnosisServer(out / "backend" if out else None, clock=lambda: clock_now[0],
                             rng=random.Random(f"{sc.seed}:codes"), admin_token="harness-admin",
                             sites={SITE_ID: "harness-site"})
    server.admin_set_scoring_config(sc.scoring, "harness-admin")

    world = World(sc.seed, sc.start, sc.tick, sc.floor_dbm, noise_sigma=sc.noise_sigma,
                  sync_mac_rotation=sc.sync_mac_rotation)
    agents: dict[str, DeviceAgent] = {}
    trajectories: dict[str, Trajectory] = {}
    for d in sc.devices:
        agent = DeviceAgent(d.device_id, random.Random(f"{sc.seed}:{d.device_id}"),
                            tx_power=d.tx_power, scan_window=sc.tick)
        agents[d.device_id] = agent
        traj = Trajectory([(sc.start + off, x, y) for off, x, y in d.waypoints])
        trajectories[d.device_id] = traj
        world.add_device(d.device_id, traj, d.tx_power, agent.identity, scanning=d.scanning)
    for a in sc.attackers:
        world.add_attacker(AttackerAgent(a.attacker_id, a.kind, a.position, a.delay, a.replay_position,
                                         a.gain, a.radius, a.tx_power))

    infected = {i.device for i in sc.infections}
    truth = _GroundTruth(infected, sc.tick)
    pending = sorted(sc.infections, key=lambda i: (i.test_time, i.device))
    uploads: list[dict] = []
    onset_days: dict[str, int | None] = {d: None for d in infected}

    def handle_infections(upto: float) -> None:
        while pending and sc.start + pending[0].test_time <= upto:
            inf = pending.pop(0)
            t = sc.start + inf.test_time
            clock_now[0] = t
            agent = agents[inf.device]
            code = server.issue_code(SITE_ID).code
            agent.apply_test_result("positive", t, code)
            keys, code = agent.upload_request(t)
            onset = None if inf.onset_offset_days is None else day_index(t) + inf.onset_offset_days
            onset_days[inf.device] = onset
            batches = server.upload_teks(keys, code, onset_day=onset)
            try:
                server.upload_teks(keys, code, onset_day=onset)
                single_use = False
            except CodeRejected:
                single_use = True
            uploads.append({"device": inf.device, "time": t, "keys": len(keys), "batches": batches,
                            "code_single_use": single_use})

    for _ in range(sc.steps):
        handle_infections(world.now)
        t = world.now
        clock_now[0] = t
        for d, origin in zip(world.step(), world.last_origins):
            ad = d.advertisement
            agents[d.device_id].on_observation(ad.rpi, ad.aem, d.rssi, t)
            truth.observe(d, origin, t)
    handle_infections(sc.start + max(sc.check_time, sc.duration))

    check = sc.start + sc.check_time
    clock_now[0] = check
    version, cfg = server.scoring_config()
    batches = server.download_batches(0)
    results: dict[str, DeviceResult] = {}
    true_scores = truth.scores(cfg, {d.device_id: d.tx_power for d in sc.devices}, onset_days)
    for d in sc.devices:
        agent = agents[d.device_id]
        outcome = agent.process_published(batches, cfg, check)
        results[d.device_id] = DeviceResult(round(outcome.score, 6), outcome.notified, outcome.matches,
                                            outcome.status, round(true_scores.get(d.device_id, 0.0), 6),
                                            d.group)
    notified = sorted(k for k, r in results.items() if r.notified)
    true_exp = sorted(k for k, r in results.items()
                      if r.true_score >= cfg.notify_threshold and k not in infected)
    metrics = RunMetrics(
        scenario=sc.name, seed=sc.seed, true_exposures=true_exp, notified=notified,
        false_notifications=sorted(set(notified) - set(true_exp)),
        missed=sorted(set(true_exp) - set(notified)), devices=results, uploads=uploads)

    if sc.enclave is not None:
        if out is None:
            with tempfile.TemporaryDirectory(prefix="ek-run-") as tmp:
                metrics.enclave_reports = _run_enclave(sc, sc.enclave, trajectories, Path(tmp))
        else:
            metrics.enclave_reports = _run_enclave(sc, sc.enclave, trajectories, out)

    for dev in sc.expect.notified:
        if dev not in notified:
            metrics.expectation_failures.append(f"{dev} expected notified")
    for dev in sc.expect.not_notified:
        if dev in notified:
            metrics.expectation_failures.append(f"{dev} expected not notified")
    cap = sc.expect.max_false_notifications
    if cap is not None and len(metrics.false_notifications) > cap:
        metrics.expectation_failures.append(
            f"{len(metrics.false_notifications)} false notifications exceed {cap}")

    if out is not None:
        _write_artifacts(out, sc, world, metrics)
    return metrics


def _write_artifacts(out: Path, sc: Scenario, world: World, metrics: RunMetrics) -> None:
    (out / "trace.jsonl").write_bytes(world.trace_bytes() + b"\n")
    (out / "metrics.json").write_text(metrics.to_json())
    files = sorted(p for p in out.rglob("*") if p.is_file())
    manifest = {
        "scenario": sc.name, "scenario_source": sc.source, "scenario_sha256": sc.digest,
        "seed": sc.seed, "package_version": __version__,
        "enclave_measurement": measure(default_bundle()).hex(),
        "artifacts": {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
