"""``exposurekit`` command line.

Exit codes: 0 pass, 1 verification failure, 2 usage or input error.
Every path, port and seed flag falls back to an ``EK_*`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Sequence

from .._codec import b64u_encode
from .._http import make_server
from ..enclave.counter import CounterService, CounterUnavailable
from ..enclave.logs import GridConfig
from ..enclave.platform import Platform, default_bundle
from ..enclave.report import ReportFormatError, grid_to_csv, grid_to_pgm
from ..enclave.runtime import RollbackDetected, init_enclave
from .audit import read_root_key, run_audit
from .runner import RunDirectoryNotEmpty, run_scenario
from .scenario import ScenarioError, bundled_scenarios, load_scenario
from .trace import ingest_trace

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("exposurekit")


class UsageError(Exception):
    pass


def _env(name: str, default=None):
    return os.environ.get(name, default)


def _env_int(name: str, default: int | None) -> int | None:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{name} must be an integer, got {raw!r}") from exc


def _load_platform(secret_file: str) -> Platform:
    path = Path(secret_file)
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(os.urandom(32).hex() + "\n")
        log.warning("created new platform secret at %s", path)
    try:
        return Platform(bytes.fromhex(path.read_text().strip()))
    except ValueError as exc:
        raise UsageError(f"{path}: platform secret must be at least 32 bytes of hex") from exc


def _open_enclave(args):
    platform = _load_platform(args.platform_secret_file)
    state = Path(args.state_dir)
    counter_file = args.counter_file or str(state) + ".counter.json"
    runtime, attestation = init_enclave(default_bundle(), platform, CounterService(counter_file), state)
    (state / "root_public_key.b64u").write_text(b64u_encode(platform.root_public_key()) + "\n")
    return runtime, attestation, platform


# -- subcommands -------------------------------------------------------------

def cmd_sim_run(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.replace_seed(args.seed)
    out = Path(args.out) if args.out else Path("runs") / f"{scenario.name}-{scenario.seed}"
    if args.force and out.exists():
        if not (out / "manifest.json").exists():
            raise UsageError(f"refusing to clear {out}: not a previous run directory")
        shutil.rmtree(out)
    metrics = run_scenario(scenario, out)
    if args.json:
        sys.stdout.write(metrics.to_json())
    else:
        print(f"scenario {metrics.scenario} (seed {metrics.seed}) -> {out}")
        print(f"  notified:            {', '.join(metrics.notified) or '-'}")
        print(f"  true exposures:      {', '.join(metrics.true_exposures) or '-'}")
        print(f"  false notifications: {', '.join(metrics.false_notifications) or '-'}")
        for rep in metrics.enclave_reports:
            print(f"  heatmap day {rep['day']}: counter {rep['counter_value']}, "
                  f"{rep['participants']} logs, verified={rep['verified']}")
        for failure in metrics.expectation_failures:
            print(f"  EXPECTATION FAILED: {failure}")
    return EXIT_OK if metrics.passed else EXIT_FAIL


def cmd_sim_list(args) -> int:
    for name in bundled_scenarios():
        print(name)
    return EXIT_OK


def _serve(httpd, what: str) -> int:
    host, port = httpd.server_address[:2]
    print(f"{what} listening on http://{host}:{port}", flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return EXIT_OK


def cmd_server_serve(args) -> int:
    from ..backend import DiagnosisServer
    from ..backend.api import build_app
    sites = {}
    for item in args.site:
        site, sep, token = item.partition("=")
        if not sep or not site or not token:
            raise UsageError(f"--site expects ID=TOKEN, got {item!r}")
        sites[site] = token
    server = DiagnosisServer(args.state_dir, admin_token=args.admin_token, sites=sites)
    return _serve(make_server(build_app(server), args.host, args.port), "diagnosis server")


def cmd_enclave_serve(args) -> int:
    from ..enclave.api import build_app
    runtime, _, platform = _open_enclave(args)
    app = build_app(runtime, platform.root_public_key(), args.operator_token)
    print(f"measurement {runtime.measurement.hex()}", flush=True)
    return _serve(make_server(app, args.host, args.port), "enclave host")


def cmd_enclave_run_map(args) -> int:
    if args.grid:
        try:
            grid = GridConfig.from_dict(json.loads(Path(args.grid).read_text()))
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"--grid: {exc}") from exc
    else:
        if args.origin_lat is None or args.origin_lon is None:
            raise UsageError("give --grid FILE or --origin-lat/--origin-lon")
        try:
            grid = GridConfig(args.origin_lat, args.origin_lon, args.rows, args.cols,
                              args.cell_deg, args.min_count)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    runtime, _, _ = _open_enclave(args)
    try:
        report = runtime.run_exposure_map(args.day, grid)
    except RollbackDetected as exc:
        print(f"ROLLBACK DETECTED: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except CounterUnavailable as exc:
        print(f"refusing to run: {exc}", file=sys.stderr)
        return EXIT_FAIL
    reports = runtime.state_dir / "reports"
    print(f"report {reports / f'report-{report.counter_value}.json'}")
    print(f"attestation {reports / f'attestation-{report.counter_value}.json'}")
    print(f"logs included {len(report.included_digests)}, points {report.total()}")
    if args.csv:
        Path(args.csv).write_text(grid_to_csv(report.grid))
    if args.pgm:
        Path(args.pgm).write_text(grid_to_pgm(report.grid))
    return EXIT_OK


def cmd_audit(args) -> int:
    if not args.root_public_key:
        raise UsageError("--root-public-key (or EK_ROOT_PUBLIC_KEY) is required")
    try:
        root = read_root_key(args.root_public_key)
        expected = bytes.fromhex(args.measurement) if args.measurement else None
        digest = bytes.fromhex(args.digest) if args.digest else None
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    verdict = run_audit(args.report, args.attestation, root, expected, digest, args.min_participants)
    if args.json:
        print(json.dumps(verdict.to_dict(), sort_keys=True))
    else:
        print(f"signature chain: {'ok' if verdict.signature_valid else 'INVALID'}")
        if verdict.included is not None:
            print(f"digest included: {'yes' if verdict.included else 'NO'}")
        print(f"participants: {verdict.participants}")
        for reason in verdict.reasons:
            print(f"flag: {reason}")
        print("PASS" if verdict.passed else "FAIL")
    return EXIT_OK if verdict.passed else EXIT_FAIL


def cmd_ingest_trace(args) -> int:
    result = ingest_trace(args.csv)
    summary = {"rows": result.rows, "skipped": result.skipped, "entities": len(result.trajectories),
               "points": {eid: len(p) for eid, p in result.trajectories.items()}}
    if args.out:
        Path(args.out).write_text(json.dumps(
            {eid: [[p.t, p.lat, p.lon] for p in pts] for eid, pts in result.trajectories.items()},
            sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exposurekit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="simulation runs").add_subparsers(dest="sim_cmd", required=True)
    run = sim.add_parser("run", help="run a scenario file or bundled scenario name")
    run.add_argument("scenario", nargs="?", default=_env("EK_SCENARIO"))
    run.add_argument("--out", default=_env("EK_RUN_DIR"), help="run directory (must be empty)")
    run.add_argument("--seed", type=int, default=_env_int("EK_SEED", None), help="override scenario seed")
    run.add_argument("--force", action="store_true", help="replace an earlier run directory")
    run.add_argument("--json", action="store_true", help="print metrics as JSON")
    run.set_defaults(func=cmd_sim_run)
    sim.add_parser("list", help="list bundled scenarios").set_defaults(func=cmd_sim_list)

    srv = sub.add_parser("server", help="diagnosis key server").add_subparsers(dest="srv_cmd", required=True)
    serve = srv.add_parser("serve")
    serve.add_argument("--host", default=_env("EK_SERVER_HOST", "127.0.0.1"))
    serve.add_argument("--port", type=int, default=_env_int("EK_SERVER_PORT", 8080))
    serve.add_argument("--state-dir", default=_env("EK_SERVER_STATE", "backend-state"))
    serve.add_argument("--admin-token", default=_env("EK_ADMIN_TOKEN"))
    serve.add_argument("--site", action="append",
                       default=[s for s in _env("EK_SITES", "").split(",") if s],
                       help="testing site as ID=TOKEN; repeatable")
    serve.set_defaults(func=cmd_server_serve)

    enc = sub.add_parser("enclave", help="exposure-map enclave").add_subparsers(dest="enc_cmd", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state-dir", default=_env("EK_ENCLAVE_STATE", "enclave-state"))
    common.add_argument("--platform-secret-file", default=_env("EK_PLATFORM_SECRET_FILE", "platform.secret"),
                        help="hex secret of the simulated platform; created if missing")
    common.add_argument("--counter-file", default=_env("EK_COUNTER_FILE"),
                        help="monotonic counter store (default: <state-dir>.counter.json)")
    es = enc.add_parser("serve", parents=[common])
    es.add_argument("--host", default=_env("EK_ENCLAVE_HOST", "127.0.0.1"))
    es.add_argument("--port", type=int, default=_env_int("EK_ENCLAVE_PORT", 8081))
    es.add_argument("--operator-token", default=_env("EK_OPERATOR_TOKEN"))
    es.set_defaults(func=cmd_enclave_serve)
    rm = enc.add_parser("run-map", parents=[common], help="produce one signed heatmap report")
    rm.add_argument("--day", type=int, required=True, help="day index (unix seconds // 86400)")
    rm.add_argument("--grid", help="JSON file with the grid configuration")
    rm.add_argument("--origin-lat", type=float)
    rm.add_argument("--origin-lon", type=float)
    rm.add_argument("--rows", type=int, default=100)
    rm.add_argument("--cols", type=int, default=100)
    rm.add_argument("--cell-deg", type=float, default=0.001)
    rm.add_argument("--min-count", type=int, default=0, help="zero cells below this count")
    rm.add_argument("--csv", help="also write the grid as CSV")
    rm.add_argument("--pgm", help="also write the grid as a plain graymap")
    rm.set_defaults(func=cmd_enclave_run_map)

    au = sub.add_parser("audit", help="verify a heatmap report")
    au.add_argument("--report", required=True)
    au.add_argument("--attestation", required=True)
    au.add_argument("--root-public-key", default=_env("EK_ROOT_PUBLIC_KEY"),
                    help="base64url key or a file containing it")
    au.add_argument("--measurement", default=_env("EK_MEASUREMENT"),
                    help="expected measurement hex (default: rebuilt from installed sources)")
    au.add_argument("--digest", help="your log receipt digest (hex)")
    au.add_argument("--min-participants", type=int, default=2,
                    help="flag reports covering fewer logs than this (0 or 1 disables)")
    au.add_argument("--json", action="store_true")
    au.set_defaults(func=cmd_audit)

    it = sub.add_parser("ingest-trace", help="parse an id,timestamp,longitude,latitude CSV")
    it.add_argument("csv")
    it.add_argument("--out", help="write trajectories as JSON")
    it.set_defaults(func=cmd_ingest_trace)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        parser = build_parser()
    except UsageError as exc:
        print(f"exposurekit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "func", None) is cmd_sim_run and not args.scenario:
        print("exposurekit: sim run needs a scenario (path or bundled name)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ScenarioError, RunDirectoryNotEmpty, ReportFormatError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"exposurekit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"exposurekit: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
