"""Scenario files: YAML documents describing one seeded end-to-end run.

Every schema error carries the line of the offending node. The full schema is
in docs/scenario-schema.md.
"""

from __future__ import annotations

import calendar
import hashlib
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from ..device import ScoringConfig
from ..enclave.logs import GridConfig


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<scenario>"):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.line = line


class _Map(dict):
    """Mapping that remembers the 1-based line of itself and of each key."""

    line: int = 0
    key_lines: dict = {}


class _Seq(list):
    line: int = 0


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_map(loader: _LineLoader, node: yaml.MappingNode) -> _Map:
    m = _Map()
    m.line = node.start_mark.line + 1
    m.key_lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        m[key] = loader.construct_object(value_node, deep=True)
        m.key_lines[key] = key_node.start_mark.line + 1
    return m


def _construct_seq(loader: _LineLoader, node: yaml.SequenceNode) -> _Seq:
    s = _Seq(loader.construct_object(n, deep=True) for n in node.value)
    s.line = node.start_mark.line + 1
    return s


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_seq)


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    waypoints: tuple[tuple[float, float, float], ...]  # (offset s, x m, y m)
    tx_power: int = 0
    group: str = ""
    scanning: bool = True


@dataclass(frozen=True)
class AttackerSpec:
    attacker_id: str
    kind: str
    position: tuple[float, float]
    delay: float = 0.0
    replay_position: tuple[float, float] | None = None
    gain: float = 0.0
    radius: float = 0.0
    tx_power: float = 0.0


@dataclass(frozen=True)
class Infection:
    device: str
    test_time: float  # offset from start
    onset_offset_days: int | None = None


@dataclass(frozen=True)
class EnclaveSpec:
    grid: GridConfig
    origin: tuple[float, float]  # lat, lon of world (0, 0)
    sample_every: float = 60.0


@dataclass(frozen=True)
class Expectations:
    notified: tuple[str, ...] = ()
    not_notified: tuple[str, ...] = ()
    max_false_notifications: int | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    start: float
    duration: float
    tick: float
    floor_dbm: float
    noise_sigma: float
    sync_mac_rotation: bool
    devices: tuple[DeviceSpec, ...]
    attackers: tuple[AttackerSpec, ...]
    infections: tuple[Infection, ...]
    scoring: ScoringConfig
    check_time: float  # offset at which devices download and score
    enclave: EnclaveSpec | None
    expect: Expectations
    source: str = "<scenario>"
    digest: str = ""

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.tick))

    def replace_seed(self, seed: int) -> "Scenario":
        from dataclasses import replace
        return replace(self, seed=seed)


class _Reader:
    def __init__(self, source: str):
        self.source = source

    def fail(self, msg: str, node: Any = None, key: str | None = None) -> ScenarioError:
        line = None
        if isinstance(node, _Map):
            line = node.key_lines.get(key, node.line) if key is not None else node.line
        elif isinstance(node, _Seq):
            line = node.line
        return ScenarioError(msg, line, self.source)

    def get(self, m: _Map, key: str, kind: type | tuple, default: Any = ..., what: str = "") -> Any:
        if not isinstance(m, _Map):
            raise self.fail(f"{what or 'section'} must be a mapping", m)
        if key not in m:
            if default is ...:
                raise self.fail(f"missing required field '{key}'" + (f" in {what}" if what else ""), m)
            return default
        value = m[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (isinstance(value, bool) and kind in (int, float)):
            names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise self.fail(f"field '{key}' must be {names}, got {type(value).__name__}", m, key)
        return value

    def point(self, m: _Map, key: str, value: Any, n: int = 2) -> tuple[float, ...]:
        if not isinstance(value, list) or len(value) != n \
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise self.fail(f"field '{key}' must be a list of {n} numbers", m, key)
        return tuple(float(v) for v in value)

    def unknown(self, m: _Map, allowed: set[str], what: str) -> None:
        if not isinstance(m, _Map):
            raise self.fail(f"each {what} must be a mapping", m)
        for key in m:
            if key not in allowed:
                raise self.fail(f"unknown field '{key}' in {what}", m, key)


def _parse_start(r: _Reader, doc: _Map) -> float:
    value = r.get(doc, "start", (int, float, str), 1_598_918_400)
    if isinstance(value, str):
        try:
            return float(calendar.timegm(time.strptime(value.rstrip("Z"), "%Y-%m-%dT%H:%M:%S")))
        except ValueError as exc:
            raise r.fail("start must be unix seconds or YYYY-MM-DDTHH:MM:SSZ", doc, "start") from exc
    return float(value)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    r = _Reader(source)
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ScenarioError(f"YAML syntax error: {exc.problem}", line, source) from exc
    if not isinstance(doc, _Map):
        raise ScenarioError("scenario must be a mapping", 1, source)
    r.unknown(doc, {"name", "seed", "start", "duration", "tick", "radio", "devices", "attackers",
                    "infections", "scoring", "check_time", "enclave", "expect"}, "scenario")

    seed = r.get(doc, "seed", int)
    duration = r.get(doc, "duration", float)
    tick = r.get(doc, "tick", float, 10.0)
    if duration <= 0 or tick <= 0:
        raise r.fail("duration and tick must be positive", doc, "duration")

    radio = r.get(doc, "radio", _Map, None) or _Map()
    if radio:
        r.unknown(radio, {"floor_dbm", "noise_sigma", "sync_mac_rotation"}, "radio")

    devices: list[DeviceSpec] = []
    seen: set[str] = set()
    for d in r.get(doc, "devices", list):
        r.unknown(d, {"id", "position", "waypoints", "tx_power", "group", "scanning"}, "device")
        did = str(r.get(d, "id", (str, int), what="device"))
        if did in seen:
            raise r.fail(f"duplicate device id '{did}'", d, "id")
        seen.add(did)
        if ("position" in d) == ("waypoints" in d):
            raise r.fail(f"device '{did}' needs exactly one of position/waypoints", d)
        if "position" in d:
            wps = ((0.0, *r.point(d, "position", d["position"])),)
        else:
            raw = r.get(d, "waypoints", list)
            if not raw:
                raise r.fail("waypoints must not be empty", d, "waypoints")
            wps = tuple(r.point(d, "waypoints", w, 3) for w in raw)
        devices.append(DeviceSpec(did, wps, r.get(d, "tx_power", int, 0),
                                  str(r.get(d, "group", str, "")), r.get(d, "scanning", bool, True)))
    if not devices:
        raise r.fail("at least one device is required", doc, "devices")

    attackers: list[AttackerSpec] = []
    for a in r.get(doc, "attackers", list, []):
        r.unknown(a, {"id", "kind", "position", "delay", "replay_position", "gain", "radius",
                      "tx_power"}, "attacker")
        aid = str(r.get(a, "id", (str, int), what="attacker"))
        if aid in seen:
            raise r.fail(f"duplicate id '{aid}'", a, "id")
        seen.add(aid)
        kind = r.get(a, "kind", str)
        if kind not in ("replayer", "amplifier", "jammer"):
            raise r.fail(f"unknown attacker kind '{kind}'", a, "kind")
        rp = a.get("replay_position")
        attackers.append(AttackerSpec(
            aid, kind, r.point(a, "position", r.get(a, "position", list)),
            r.get(a, "delay", float, 0.0),
            r.point(a, "replay_position", rp) if rp is not None else None,
            r.get(a, "gain", float, 0.0), r.get(a, "radius", float, 0.0),
            r.get(a, "tx_power", float, 0.0)))

    infections: list[Infection] = []
    for inf in r.get(doc, "infections", list, []):
        r.unknown(inf, {"device", "test_time", "onset_offset_days"}, "infection")
        dev = str(r.get(inf, "device", (str, int), what="infection"))
        if dev not in {d.device_id for d in devices}:
            raise r.fail(f"infection names unknown device '{dev}'", inf, "device")
        infections.append(Infection(dev, r.get(inf, "test_time", float),
                                    r.get(inf, "onset_offset_days", int, None)))

    scoring_raw = r.get(doc, "scoring", _Map, None)
    try:
        scoring = ScoringConfig.from_dict(dict(scoring_raw or {}))
    except (TypeError, ValueError) as exc:
        raise r.fail(f"invalid scoring: {exc}", doc, "scoring") from exc

    enclave = None
    if "enclave" in doc:
        e = r.get(doc, "enclave", _Map)
        r.unknown(e, {"grid", "origin", "sample_every"}, "enclave")
        try:
            grid = GridConfig.from_dict(dict(r.get(e, "grid", _Map)))
        except (KeyError, TypeError, ValueError) as exc:
            raise r.fail(f"invalid grid: {exc}", e, "grid") from exc
        enclave = EnclaveSpec(grid, r.point(e, "origin", r.get(e, "origin", list)),
                              r.get(e, "sample_every", float, 60.0))

    expect_raw = r.get(doc, "expect", _Map, None) or _Map()
    if expect_raw:
        r.unknown(expect_raw, {"notified", "not_notified", "max_false_notifications"}, "expect")
    expect = Expectations(tuple(map(str, expect_raw.get("notified", []))),
                          tuple(map(str, expect_raw.get("not_notified", []))),
                          expect_raw.get("max_false_notifications"))

    return Scenario(
        name=str(r.get(doc, "name", str, Path(source).stem)),
        seed=seed, start=_parse_start(r, doc), duration=duration, tick=tick,
        floor_dbm=r.get(radio, "floor_dbm", float, -90.0),
        noise_sigma=r.get(radio, "noise_sigma", float, 0.0),
        sync_mac_rotation=r.get(radio, "sync_mac_rotation", bool, True),
        devices=tuple(devices), attackers=tuple(attackers), infections=tuple(infections),
        scoring=scoring, check_time=r.get(doc, "check_time", float, duration),
        enclave=enclave, expect=expect, source=source,
        digest=hashlib.sha256(text.encode()).hexdigest(),
    )


def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("exposurekit.scenarios").iterdir()
                  if p.name.endswith(".yaml"))


def load_scenario(path_or_name: str | Path) -> Scenario:
    """Load a scenario file, or a bundled scenario by bare name."""
    path = Path(path_or_name)
    if path.exists():
        return parse_scenario(path.read_text(), str(path))
    name = str(path_or_name)
    if name in bundled_scenarios():
        text = resources.files("exposurekit.scenarios").joinpath(f"{name}.yaml").read_text()
        return parse_scenario(text, f"{name}.yaml")
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name!r}")
