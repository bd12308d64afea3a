"""Discrete-time virtual BLE environment.

Every step all emitters advertise once and every scanning device hears each
advertisement whose received power clears the sensitivity floor, unless a
jammer covers the sender or the receiver. Advertisements carry the emitter's
identity only as simulator ground truth; ``Delivery.advertisement`` always
has it stripped.
"""

from __future__ import annotations

import bisect
import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from .protocol import interval_number

DEFAULT_TICK = 10.0
DEFAULT_FLOOR_DBM = -90.0
MIN_DISTANCE_M = 0.1

Position = tuple[float, float]
# interval -> (rpi, aem)
IdentitySource = Callable[[int], tuple[bytes, bytes]]


@dataclass(frozen=True)
class PathLoss:
    """Log-distance model: loss = ref_loss + 10 * exponent * log10(d)."""

    ref_loss: float = 40.0
    exponent: float = 2.0


def rssi_at(tx_power: float, distance: float, noise: float = 0.0,
            model: PathLoss = PathLoss()) -> float:
    if distance < 0:
        raise ValueError("distance must be non-negative")
    if distance == 0:
        distance = MIN_DISTANCE_M
    return tx_power - (model.ref_loss + 10 * model.exponent * math.log10(distance)) + noise


class Trajectory:
    """Piecewise-linear path through timestamped waypoints.

    Two waypoints sharing a timestamp describe a jump: from that instant on the
    later one applies. Before the first / after the last waypoint the position
    is held.
    """

    def __init__(self, waypoints: Iterable[tuple[float, float, float]]):
        pts = sorted(((float(t), float(x), float(y)) for t, x, y in waypoints),
                     key=lambda w: w[0])
        if not pts:
            raise ValueError("trajectory needs at least one waypoint")
        self._pts = pts
        self._times = [p[0] for p in pts]

    @classmethod
    def fixed(cls, position: Position) -> "Trajectory":
        return cls([(0.0, position[0], position[1])])

    def at(self, t: float) -> Position:
        k = bisect.bisect_right(self._times, t)
        if k == 0:
            return self._pts[0][1:]
        if k == len(self._pts):
            return self._pts[-1][1:]
        t0, x0, y0 = self._pts[k - 1]
        t1, x1, y1 = self._pts[k]
        f = (t - t0) / (t1 - t0)
        return (x0 + f * (x1 - x0), y0 + f * (y1 - y0))


@dataclass
class DevicePresence:
    device_id: str
    position: Position
    tx_power: float
    current_mac: bytes = b""
    current_rpi: bytes = b""
    current_aem: bytes = b""
    interval: int = -1


@dataclass(frozen=True)
class Advertisement:
    mac: bytes
    rpi: bytes
    aem: bytes
    emitted_at: float
    origin: str | None = None

    def stripped(self) -> "Advertisement":
        return replace(self, origin=None)


@dataclass(frozen=True)
class Delivery:
    device_id: str
    advertisement: Advertisement
    rssi: float


@dataclass
class AttackerAgent:
    """Adversary acting only through the advertisement channel.

    ``replayer`` listens at ``position`` and re-emits what it hears ``delay``
    seconds later at ``replay_position``. ``amplifier`` relays what it hears in
    the same step with ``gain`` dB extra power. ``jammer`` suppresses every
    link with an endpoint within ``radius`` meters.
    """

    attacker_id: str
    kind: str
    position: Position
    delay: float = 0.0
    replay_position: Position | None = None
    gain: float = 0.0
    radius: float = 0.0
    tx_power: float = 0.0
    captured: list[tuple[float, Advertisement]] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("replayer", "amplifier", "jammer"):
            raise ValueError(f"unknown attacker kind {self.kind!r}")


def inject_replay(attacker: AttackerAgent, captured: Advertisement, at_time: float,
                  at_position: Position | None = None) -> Advertisement:
    """Re-emit a captured advertisement verbatim; only ground truth changes."""
    if at_position is not None:
        attacker.replay_position = at_position
    return replace(captured, emitted_at=at_time, origin=attacker.attacker_id)


def rotate(device: DevicePresence, new_interval: int, identity: IdentitySource,
           rng: random.Random) -> DevicePresence:
    """Fresh MAC and RPI for ``new_interval``, swapped in one assignment."""
    rpi, aem = identity(new_interval)
    return replace(device, current_mac=rng.randbytes(6), current_rpi=rpi,
                   current_aem=aem, interval=new_interval)


@dataclass
class _Node:
    presence: DevicePresence
    trajectory: Trajectory
    identity: IdentitySource
    scanning: bool


@dataclass(frozen=True)
class TraceEvent:
    time: float
    origin: str
    mac: bytes
    rpi: bytes
    honest: bool

    def to_json(self) -> str:
        return json.dumps({"t": self.time, "origin": self.origin, "mac": self.mac.hex(),
                           "rpi": self.rpi.hex(), "honest": self.honest}, sort_keys=True)


class World:
    """Seeded 2-D BLE world. Not thread-safe; one owner drives ``step``."""

    def __init__(self, seed: int, start: float, tick: float = DEFAULT_TICK,
                 floor: float = DEFAULT_FLOOR_DBM, path_loss: PathLoss = PathLoss(),
                 noise_sigma: float = 0.0, sync_mac_rotation: bool = True):
        self.rng = random.Random(seed)
        self.now = float(start)
        self.tick = float(tick)
        self.floor = floor
        self.path_loss = path_loss
        self.noise_sigma = noise_sigma
        # False rotates MACs half an interval out of phase with RPIs; only
        # useful to demonstrate linkage in tests.
        self.sync_mac_rotation = sync_mac_rotation
        self.nodes: dict[str, _Node] = {}
        self.attackers: dict[str, AttackerAgent] = {}
        self.trace: list[TraceEvent] = []
        self._desync_macs: dict[tuple[str, int], bytes] = {}
        # true origin of each delivery from the last step; harness-only
        self.last_origins: list[str] = []

    def add_device(self, device_id: str, trajectory: Trajectory | Position,
                   tx_power: float, identity: IdentitySource, scanning: bool = True) -> None:
        if device_id in self.nodes or device_id in self.attackers:
            raise ValueError(f"duplicate id {device_id!r}")
        if not isinstance(trajectory, Trajectory):
            trajectory = Trajectory.fixed(trajectory)
        presence = DevicePresence(device_id, trajectory.at(self.now), tx_power)
        self.nodes[device_id] = _Node(presence, trajectory, identity, scanning)

    def add_attacker(self, attacker: AttackerAgent) -> None:
        if attacker.attacker_id in self.nodes or attacker.attacker_id in self.attackers:
            raise ValueError(f"duplicate id {attacker.attacker_id!r}")
        self.attackers[attacker.attacker_id] = attacker

    def presence(self, device_id: str) -> DevicePresence:
        return self.nodes[device_id].presence

    def _link(self, tx_power: float, a: Position, b: Position) -> float:
        noise = self.rng.gauss(0.0, self.noise_sigma) if self.noise_sigma else 0.0
        return rssi_at(tx_power, math.dist(a, b), noise, self.path_loss)

    def _jammed(self, pos: Position) -> bool:
        return any(a.kind == "jammer" and math.dist(a.position, pos) <= a.radius
                   for a in self.attackers.values())

    def _mac_epoch(self, t: float) -> int:
        return interval_number(t if self.sync_mac_rotation else t + 300)

    def step(self) -> list[Delivery]:
        """Advance one tick; returns deliveries ordered by (receiver, sender)."""
        t = self.now
        interval = interval_number(t)
        emissions: list[tuple[Advertisement, Position, float]] = []

        for device_id in sorted(self.nodes):
            node = self.nodes[device_id]
            p = node.presence
            pos = node.trajectory.at(t)
            if p.interval != interval:
                p = rotate(p, interval, node.identity, self.rng)
            if not self.sync_mac_rotation:
                p = replace(p, current_mac=self._desync_mac(device_id, t))
            p = replace(p, position=pos)
            node.presence = p
            ad = Advertisement(p.current_mac, p.current_rpi, p.current_aem, t, device_id)
            emissions.append((ad, pos, p.tx_power))

        for attacker_id in sorted(self.attackers):
            attacker = self.attackers[attacker_id]
            if attacker.kind != "replayer":
                continue
            due = [ad for when, ad in attacker.captured if t - self.tick < when + attacker.delay <= t]
            for ad in due:
                where = attacker.replay_position or attacker.position
                emissions.append((inject_replay(attacker, ad, t), where, attacker.tx_power))
            attacker.captured = [(w, ad) for w, ad in attacker.captured if w + attacker.delay > t]

        relayed = []
        for attacker_id in sorted(self.attackers):
            attacker = self.attackers[attacker_id]
            if attacker.kind not in ("replayer", "amplifier"):
                continue
            for ad, pos, power in emissions:
                if ad.origin in self.attackers or self._jammed(attacker.position):
                    continue
                if self._link(power, pos, attacker.position) < self.floor:
                    continue
                if attacker.kind == "replayer":
                    attacker.captured.append((t, ad))
                else:
                    relayed.append((replace(ad, origin=attacker_id), attacker.position,
                                    power + attacker.gain))
        emissions.extend(relayed)

        for ad, _, _ in emissions:
            self.trace.append(TraceEvent(t, ad.origin, ad.mac, ad.rpi, ad.origin in self.nodes))

        deliveries: list[Delivery] = []
        origins: list[str] = []
        for device_id in sorted(self.nodes):
            node = self.nodes[device_id]
            if not node.scanning:
                continue
            rx = node.presence.position
            rx_jammed = self._jammed(rx)
            for ad, pos, power in emissions:
                if ad.origin == device_id:
                    continue
                rssi = self._link(power, pos, rx)
                if rx_jammed or self._jammed(pos) or rssi < self.floor:
                    continue
                deliveries.append(Delivery(device_id, ad.stripped(), rssi))
                origins.append(ad.origin)

        self.last_origins = origins
        self.now = t + self.tick
        return deliveries

    def _desync_mac(self, device_id: str, t: float) -> bytes:
        key = (device_id, self._mac_epoch(t))
        if key not in self._desync_macs:
            self._desync_macs[key] = self.rng.randbytes(6)
        return self._desync_macs[key]

    def run(self, steps: int, on_delivery: Callable[[Delivery], None] | None = None) -> int:
        total = 0
        for _ in range(steps):
            for d in self.step():
                total += 1
                if on_delivery is not None:
                    on_delivery(d)
        return total

    def trace_bytes(self) -> bytes:
        return "\n".join(e.to_json() for e in self.trace).encode()


def link_by_continuity(trace: Iterable[TraceEvent]) -> list[set[tuple[bytes, bytes]]]:
    """Chain (mac, rpi) epochs that share either identifier.

    Models an observer that follows a device across a rotation whenever one of
    the two identifiers survives it. Returns the recovered chains as sets of
    epochs.
    """
    parent: dict[object, object] = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    epochs = set()
    for ev in trace:
        epoch = (ev.mac, ev.rpi)
        epochs.add(epoch)
        a, b = find(("mac", ev.mac)), find(("rpi", ev.rpi))
        if a != b:
            parent[a] = b
    chains: dict[object, set] = {}
    for epoch in epochs:
        chains.setdefault(find(("mac", epoch[0])), set()).add(epoch)
    return list(chains.values())


def max_epochs_linked(trace: list[TraceEvent]) -> dict[str, int]:
    """Largest number of one honest device's epochs inside a single chain."""
    owner = {(e.mac, e.rpi): e.origin for e in trace if e.honest}
    best: dict[str, int] = {o: 0 for o in owner.values()}
    for chain in link_by_continuity([e for e in trace if e.honest]):
        per: dict[str, int] = {}
        for epoch in chain:
            per[owner[epoch]] = per.get(owner[epoch], 0) + 1
        for o, n in per.items():
            best[o] = max(best[o], n)
    return best
