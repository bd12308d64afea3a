"""Acceptance criteria 1-11. Each test carries ``@pytest.mark.acceptance``; the
conftest hook prints one PASS/FAIL line per criterion at the end of the run."""

import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import pytest

from exposurekit._codec import b64u_encode
from exposurekit._http import make_server, serve_in_thread
from exposurekit.backend import CodeRejected, DiagnosisServer
from exposurekit.backend.api import BackendClient, build_app
from exposurekit.device import DeviceAgent
from exposurekit.enclave import (
    CounterService,
    GridConfig,
    LocationLog,
    Platform,
    RollbackDetected,
    SealingError,
    default_bundle,
    encrypt_for_enclave,
    init_enclave,
    measure,
    verify_attestation,
    verify_inclusion,
    verify_report,
)
from exposurekit.enclave.report import save_json
from exposurekit.harness.cli import main as cli
from exposurekit.harness.runner import run_scenario
from exposurekit.protocol import (
    PublishedTEK,
    TemporaryExposureKey,
    derive_aemk,
    derive_rpi,
    derive_rpik,
    encode_metadata,
    encrypt_aem,
    expand_tek,
    generate_tek,
    match_keys,
)
from exposurekit.radio import World, max_epochs_linked
from oracles import Contact, brute_force_grid, brute_force_matches

VECTORS = Path(__file__).parent / "vectors" / "key_schedule.json"
BUNDLE = default_bundle()
MEAS = measure(BUNDLE)
DAY = 18_500


def _published(tek):
    return PublishedTEK(tek, tek.valid_from + 144)


# -- 1 -----------------------------------------------------------------------------

@pytest.mark.acceptance(1, "Key-schedule conformance")
def test_c01_key_schedule_golden_vectors_and_expansion():
    t0 = time.perf_counter()
    vectors = json.loads(VECTORS.read_text())["vectors"]
    zero = [v for v in vectors if v["tek"] == "00" * 16]
    assert zero and len({v["tek"] for v in vectors}) == 3
    for v in vectors:
        tek = bytes.fromhex(v["tek"])
        rpik = derive_rpik(tek)
        assert rpik.hex() == v["rpik"]
        assert derive_aemk(tek).hex() == v["aemk"]
        rpi = derive_rpi(rpik, v["interval"])
        assert rpi.hex() == v["rpi"]
        assert encode_metadata(-20).hex() == v["metadata"]
        assert encrypt_aem(derive_aemk(tek), rpi, bytes.fromhex(v["metadata"])).hex() == v["aem"]

    rng = random.Random(1)
    everything = set()
    for _ in range(1000):
        tek = generate_tek(rng, rng.randrange(18_000, 19_000))
        rpis = [r for _, r in expand_tek(tek)]
        assert len(rpis) == 144 and len(set(rpis)) == 144
        everything.update(rpis)
    assert len(everything) == 144_000
    elapsed = time.perf_counter() - t0
    print(f"criterion 1 runtime {elapsed:.2f}s")
    assert elapsed < 5.0


# -- 2 -----------------------------------------------------------------------------

def _matching_instance(rng: random.Random):
    teks = [generate_tek(rng, rng.randrange(18_500, 18_504)) for _ in range(rng.randint(0, 20))]
    published = [_published(t) for t in teks]
    contacts = []
    for _ in range(rng.randint(0, 500)):
        roll = rng.random()
        if teks and roll < 0.6:
            t = rng.choice(teks)
            i = t.valid_from + rng.randrange(144)
            seen = (i + rng.randint(-4, 4)) * 600 + rng.randrange(600)
            contacts.append(Contact(derive_rpi(derive_rpik(t), i), seen))
        elif contacts and roll < 0.7:
            c = rng.choice(contacts)  # same RPI seen again later
            contacts.append(Contact(c.rpi, c.first_seen + rng.randrange(0, 6000)))
        else:
            contacts.append(Contact(rng.randbytes(16), rng.randrange(18_500 * 144, 18_504 * 144) * 600))
    return published, contacts


@pytest.mark.acceptance(2, "Matching oracle equivalence")
def test_c02_match_keys_equals_brute_force():
    t0 = time.perf_counter()
    rng = random.Random(2)
    total_matches = 0
    for _ in range(200):
        published, contacts = _matching_instance(rng)
        tolerance = rng.choice((0, 1, 2))
        index_of = {id(c): n for n, c in enumerate(contacts)}
        events = match_keys(published, contacts, tolerance)
        got = [(e.tek_index, index_of[id(e.contact)], e.matched_interval) for e in events]
        assert len(got) == len(set(got))
        assert set(got) == brute_force_matches(published, contacts, tolerance)
        total_matches += len(got)
    assert total_matches > 1000  # the instances do exercise matching
    elapsed = time.perf_counter() - t0
    print(f"criterion 2 runtime {elapsed:.2f}s, {total_matches} matches")
    assert elapsed < 30.0


# -- 3 -----------------------------------------------------------------------------

@pytest.mark.acceptance(3, "End-to-end notification scenario")
def test_c03_close_contact_end_to_end(tmp_path):
    t0 = time.perf_counter()
    m = run_scenario("close_contact", tmp_path / "run")
    elapsed = time.perf_counter() - t0
    assert len(m.devices) == 20
    [upload] = m.uploads
    assert upload["device"] == "A" and upload["code_single_use"]
    assert m.devices["B"].score == 30.0 and m.devices["C"].score == 30.0
    assert m.devices["B"].notified and m.devices["C"].notified
    assert m.devices["B"].status == m.devices["C"].status == "invalidated_by_exposure"
    assert m.devices["D"].score < 15.0 and not m.devices["D"].notified
    assert m.notified == ["B", "C"] and m.false_notifications == []
    again = run_scenario("close_contact", tmp_path / "again")
    assert again.to_json() == m.to_json()
    assert (tmp_path / "run" / "trace.jsonl").read_bytes() == (tmp_path / "again" / "trace.jsonl").read_bytes()
    print(f"criterion 3 runtime {elapsed:.2f}s")
    assert elapsed < 10.0


# -- 4 -----------------------------------------------------------------------------

@pytest.mark.acceptance(4, "Replay defense")
def test_c04_replay_three_hours_later_and_within_tolerance():
    late = run_scenario("replay_3h")
    side = sorted(k for k, r in late.devices.items() if r.group == "replay_side")
    assert len(side) == 3
    assert [k for k in side if late.devices[k].notified] == []
    assert all(late.devices[k].matches == 0 for k in side)
    assert late.devices["B"].notified  # the honest contact at the capture site still works

    early = run_scenario("replay_5min")
    # residual risk: a replay inside the matching tolerance is accepted
    assert [k for k in side if early.devices[k].notified] == side
    assert set(early.false_notifications) == set(side)


# -- 5 -----------------------------------------------------------------------------

def _day_world(sync: bool) -> World:
    start = 18_500 * 86400 + 12 * 3600  # noon to noon crosses a TEK change as well
    world = World(seed=5, start=start, tick=30, sync_mac_rotation=sync)
    for k in range(4):
        agent = DeviceAgent(f"d{k}", random.Random(k))
        world.add_device(f"d{k}", (k * 3.0, 0.0), 0, agent.identity)
    world.run(int(86400 / 30))
    return world


@pytest.mark.acceptance(5, "Unlinkability trace property")
def test_c05_no_identifier_spans_rotation():
    world = _day_world(sync=True)
    honest = [e for e in world.trace if e.honest]
    assert honest[-1].time - honest[0].time >= 86400 - 30
    epochs_by_mac, epochs_by_rpi = {}, {}
    for e in honest:
        epoch = int(e.time // 600)
        epochs_by_mac.setdefault(e.mac, set()).add(epoch)
        epochs_by_rpi.setdefault(e.rpi, set()).add(epoch)
    assert all(len(v) == 1 for v in epochs_by_mac.values())
    assert all(len(v) == 1 for v in epochs_by_rpi.values())
    linked = max_epochs_linked(world.trace)
    assert set(linked) == {"d0", "d1", "d2", "d3"} and max(linked.values()) == 1

    # control: with MACs rotating out of phase the same adversary links the whole day
    leaky = max_epochs_linked(_day_world(sync=False).trace)
    assert min(leaky.values()) > 100


# -- 6 -----------------------------------------------------------------------------

def _random_store(rng: random.Random, grid: GridConfig, n_logs: int, max_points: int):
    logs = []
    for k in range(n_logs):
        pts = []
        for _ in range(rng.randint(1, max_points)):
            lat = grid.origin_lat + rng.uniform(-0.5, grid.rows + 0.5) * grid.cell_deg
            lon = grid.origin_lon + rng.uniform(-0.5, grid.cols + 0.5) * grid.cell_deg
            if rng.random() < 0.2:  # exactly on a cell edge
                lat = grid.origin_lat + rng.randrange(grid.rows) * grid.cell_deg
            day = DAY if rng.random() < 0.9 else DAY + rng.choice((-1, 1))
            pts.append((lat, lon, day * 86400 + rng.uniform(0, 86399)))
        logs.append(LocationLog.new(f"u{k}", pts, log_id=rng.randbytes(16)))
    return logs


def _fresh_enclave(path: Path, platform: Platform):
    rt, att = init_enclave(BUNDLE, platform, CounterService(path / "counter.json"), path / "state")
    return rt, att


@pytest.mark.acceptance(6, "Heatmap oracle and once-only")
def test_c06_heatmap_oracle_and_once_only(tmp_path):
    platform = Platform(b"\x06" * 32)
    root = platform.root_public_key()
    rng = random.Random(6)
    for store in range(100):
        grid = GridConfig(39.9 + rng.uniform(-0.1, 0.1), 116.3 + rng.uniform(-0.1, 0.1),
                          rng.randint(1, 8), rng.randint(1, 8), rng.choice((0.001, 0.0005, 0.002)))
        logs = _random_store(rng, grid, rng.randint(0, 200), 50)
        rt, att = _fresh_enclave(tmp_path / f"s{store}", platform)
        split = rng.randint(0, len(logs))
        for lg in logs[:split]:
            rt.ingest_log(encrypt_for_enclave(lg, att, root, MEAS))
        first = rt.run_exposure_map(DAY, grid)
        for lg in logs[split:]:
            rt.ingest_log(encrypt_for_enclave(lg, att, root, MEAS))
        second = rt.run_exposure_map(DAY, grid)

        assert [list(r) for r in first.grid] == brute_force_grid(logs[:split], DAY, grid)
        assert [list(r) for r in second.grid] == brute_force_grid(logs[split:], DAY, grid)
        summed = [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(first.grid, second.grid)]
        assert summed == brute_force_grid(logs, DAY, grid)

        on_day = [lg for lg in logs if DAY in lg.days()]
        assert set(first.included_digests).isdisjoint(second.included_digests)
        assert set(first.included_digests) | set(second.included_digests) == {lg.digest for lg in on_day}
        for lg in on_day:
            assert verify_inclusion(first, lg.digest) != verify_inclusion(second, lg.digest)
        assert verify_report(first, att, root, MEAS) and verify_report(second, att, root, MEAS)
        assert first.counter_value < second.counter_value


# -- 7 -----------------------------------------------------------------------------

@pytest.mark.acceptance(7, "Isolation-attack detection")
def test_c07_isolation_attack_detected(tmp_path, capsys):
    platform = Platform(b"\x07" * 32)
    root = platform.root_public_key()
    grid = GridConfig(39.9, 116.3, 4, 4)
    rng = random.Random(7)
    logs = _random_store(rng, grid, 12, 10)
    logs = [replace(lg, points=lg.points + ((39.9005, 116.3005, DAY * 86400 + 60),)) for lg in logs]
    victim, honest = logs[0], logs[1:]

    # the honest pipeline includes everyone
    rt, att = _fresh_enclave(tmp_path / "honest", platform)
    for lg in logs:
        rt.ingest_log(encrypt_for_enclave(lg, att, root, MEAS))
    fair = rt.run_exposure_map(DAY, grid)
    assert all(verify_inclusion(fair, lg.digest) for lg in logs)

    # a malicious operator feeds a second instance only the victim's log
    evil, evil_att = _fresh_enclave(tmp_path / "isolated", platform)
    evil.ingest_log(encrypt_for_enclave(victim, evil_att, root, MEAS))
    isolated = evil.run_exposure_map(DAY, grid)
    assert verify_report(isolated, evil_att, root, MEAS)  # genuinely signed
    assert isolated.included_digests == (victim.digest,)
    assert not any(verify_inclusion(isolated, lg.digest) for lg in honest)

    report_path, att_path = tmp_path / "iso-report.json", tmp_path / "iso-att.json"
    save_json(report_path, isolated.to_dict())
    save_json(att_path, evil_att.to_dict())
    root_file = tmp_path / "root.b64u"
    root_file.write_text(b64u_encode(root))
    base = ["audit", "--report", str(report_path), "--attestation", str(att_path),
            "--root-public-key", str(root_file)]
    for lg in honest:
        assert cli(base + ["--digest", lg.digest.hex()]) == 1
    assert cli(base) == 1  # single-participant report is flagged even without a digest
    assert cli(base + ["--digest", victim.digest.hex()]) == 1
    capsys.readouterr()


# -- 8 -----------------------------------------------------------------------------

@pytest.mark.acceptance(8, "Rollback detection")
def test_c08_rollback_detected_every_time(tmp_path):
    platform = Platform(b"\x08" * 32)
    root = platform.root_public_key()
    grid = GridConfig(39.9, 116.3, 3, 3)
    rng = random.Random(8)
    detections = 0
    for trial in range(50):
        rt, att = _fresh_enclave(tmp_path / f"t{trial}", platform)
        state = rt.state_dir / "consumption.sealed"
        snapshots = []
        for _ in range(rng.randint(0, 4)):
            for lg in _random_store(rng, grid, rng.randint(0, 3), 5):
                rt.ingest_log(encrypt_for_enclave(lg, att, root, MEAS))
            snapshots.append(state.read_bytes() if state.exists() else None)
            rt.run_exposure_map(DAY, grid)
        snapshots.append(state.read_bytes() if state.exists() else None)
        rt.run_exposure_map(DAY, grid)
        reports_before = sorted(os.listdir(rt.state_dir / "reports"))

        snap = rng.choice(snapshots)
        if snap is None:
            state.unlink()
        else:
            state.write_bytes(snap)
        with pytest.raises(RollbackDetected):
            rt.run_exposure_map(DAY, grid)
        # a restarted instance is not fooled either
        rt2, _ = _fresh_enclave(tmp_path / f"t{trial}", platform)
        with pytest.raises(RollbackDetected):
            rt2.run_exposure_map(DAY, grid)
        assert sorted(os.listdir(rt.state_dir / "reports")) == reports_before
        detections += 1
    assert detections == 50


# -- 9 -----------------------------------------------------------------------------

def _flip(data: bytes, rng: random.Random) -> bytes:
    i = rng.randrange(len(data) * 8)
    out = bytearray(data)
    out[i // 8] ^= 1 << (i % 8)
    return bytes(out)


@pytest.mark.acceptance(9, "Attestation and sealing suite")
def test_c09_attestation_and_sealing(tmp_path):
    platform = Platform(b"\x09" * 32)
    root = platform.root_public_key()
    rt, att = init_enclave(BUNDLE, platform, CounterService(), tmp_path / "e")
    assert verify_attestation(att, root, MEAS)
    rng = random.Random(9)

    false_accepts = 0
    fields = ("measurement", "enclave_public_key", "encryption_public_key", "nonce", "platform_signature")
    for case in range(1000):
        kind = case % 3
        if kind == 0:  # wrong expected measurement
            ok = verify_attestation(att, root, _flip(MEAS, rng))
        elif kind == 1:  # tampered public key
            name = rng.choice(("enclave_public_key", "encryption_public_key"))
            ok = verify_attestation(replace(att, **{name: _flip(getattr(att, name), rng)}), root, MEAS)
        else:  # tampered signature or any other signed field
            name = rng.choice(fields)
            tampered = replace(att, **{name: _flip(getattr(att, name), rng)})
            ok = verify_attestation(tampered, root, tampered.measurement if name == "measurement" else MEAS)
        false_accepts += ok
    assert false_accepts == 0

    for k in range(100):
        data = rng.randbytes(rng.randint(0, 256))
        other_bundle = BUNDLE + rng.randbytes(rng.randint(1, 8))
        other, _ = init_enclave(other_bundle, platform, CounterService(), tmp_path / f"o{k}")
        blob = rt.seal(data)
        assert rt.unseal(blob) == data
        with pytest.raises(SealingError):
            other.unseal(blob)
        # forging the sealed_for field does not help either
        with pytest.raises(SealingError):
            other.unseal(replace(blob, sealed_for=other.measurement))
        raw = blob.to_bytes()
        with pytest.raises(SealingError):
            rt.unseal(_flip(raw, rng))
        with pytest.raises(SealingError):
            rt.unseal(raw[:rng.randrange(len(raw))])


# -- 10 ----------------------------------------------------------------------------

@pytest.mark.acceptance(10, "Obliviousness contract")
def test_c10_decrypt_count_independent_of_content(tmp_path):
    platform = Platform(b"\x0a" * 32)
    root = platform.root_public_key()
    grid = GridConfig(39.9, 116.3, 5, 5)
    rng = random.Random(10)
    size = 25
    counts = []
    for store in range(50):
        shape = store % 5
        logs = []
        for k in range(size):
            if shape == 0:  # everyone in one cell
                pts = [(39.9001, 116.3001, DAY * 86400 + 5)] * rng.randint(1, 50)
            elif shape == 1:  # everything outside the grid
                pts = [(10.0, 10.0, DAY * 86400 + j) for j in range(rng.randint(1, 50))]
            elif shape == 2:  # one point each
                pts = [(39.9 + rng.random() * 0.005, 116.3 + rng.random() * 0.005, DAY * 86400)]
            elif shape == 3:  # one heavy user, everyone else light
                n = 50 if k == 0 else 1
                pts = [(39.9 + rng.random() * 0.005, 116.3 + rng.random() * 0.005, DAY * 86400 + j)
                       for j in range(n)]
            else:
                pts = [(39.9 + rng.random() * 0.005, 116.3 + rng.random() * 0.005,
                        DAY * 86400 + rng.uniform(0, 86399)) for _ in range(rng.randint(1, 50))]
            logs.append(LocationLog.new(f"u{k}", pts, log_id=rng.randbytes(16)))
        rt, att = _fresh_enclave(tmp_path / f"s{store}", platform)
        for lg in logs:
            rt.ingest_log(encrypt_for_enclave(lg, att, root, MEAS))
        before = rt.stats.decrypt_ops
        rt.run_exposure_map(DAY, grid)
        counts.append(rt.stats.last_run_decrypts)
        assert rt.stats.decrypt_ops - before == size
        rt.run_exposure_map(DAY, grid)  # everything consumed; the work is the same
        counts.append(rt.stats.last_run_decrypts)
    assert set(counts) == {size}


# -- 11 ----------------------------------------------------------------------------

def _teks(seed):
    rng = random.Random(seed)
    return [TemporaryExposureKey(rng.randbytes(16), 18_500 * 144)]


@pytest.mark.acceptance(11, "One-time code exactly-once")
def test_c11_concurrent_redemption_in_process():
    server = DiagnosisServer(clock=lambda: 18_500 * 86400 + 100.0, sites={"lab": "t"})
    code = server.issue_code("lab").code
    barrier = threading.Barrier(100)

    def attempt(k):
        barrier.wait()
        try:
            server.upload_teks(_teks(k), code)
            return True
        except CodeRejected as exc:
            assert exc.reason == "redeemed"
            return False

    with ThreadPoolExecutor(100) as pool:
        results = list(pool.map(attempt, range(100)))
    assert results.count(True) == 1
    assert sum(len(b.entries) for b in server.download_batches()) == 1


@pytest.mark.acceptance(11, "One-time code exactly-once")
def test_c11_concurrent_redemption_over_http(tmp_path):
    server = DiagnosisServer(tmp_path, clock=lambda: 18_500 * 86400 + 100.0, sites={"lab": "t"})
    httpd = make_server(build_app(server))
    serve_in_thread(httpd)
    try:
        client = BackendClient(f"http://127.0.0.1:{httpd.server_address[1]}")
        code = client.issue_code("lab", "t")
        barrier = threading.Barrier(100)

        def attempt(k):
            barrier.wait()
            return client.upload(_teks(1000 + k), code)[0]

        with ThreadPoolExecutor(100) as pool:
            statuses = list(pool.map(attempt, range(100)))
    finally:
        httpd.shutdown()
        httpd.server_close()
    assert statuses.count(200) == 1 and statuses.count(403) == 99
    redeems = [json.loads(x) for x in (tmp_path / "journal.jsonl").read_text().splitlines()]
    assert sum(r["type"] == "redeem" for r in redeems) == 1
