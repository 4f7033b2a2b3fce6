"""Synthetic network: relays, clients, servers, latency/bandwidth/loss model.

Latency between nodes is great-circle propagation (200 km/ms, roughly 2/3 c in
fiber) plus a fixed per-hop processing floor and sampled jitter.  Every node
owns a FIFO transmit queue sized by its bandwidth; cells wait behind whatever
is already queued, which is what congestion-sensitive selection strategies are
supposed to detect.  Cell batches move hop to hop as chunks: queue occupancy
is claimed per chunk when the chunk reaches a node, so fine-grained
interleaving below the chunk size is approximated.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import yaml

from .engine import Engine, RngStream, TICKS_PER_SECOND, ms_to_ticks, ticks_to_ms

EARTH_RADIUS_KM = 6371.0


def great_circle_km(a: tuple, b: tuple) -> float:
    """Haversine distance in km between two (lat, lon) points in degrees."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _check_position(position: tuple) -> None:
    lat, lon = position
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValueError(f"invalid position {position!r}")


@dataclass(frozen=True)
class RelayDescriptor:
    """One relay as listed in the consensus."""

    relay_id: int
    bandwidth: float  # KiB/s
    is_guard: bool
    is_exit: bool
    position: tuple  # (lat, lon) degrees
    exit_policy: frozenset = frozenset()  # allowed destination ports
    is_malicious: bool = False

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError(f"relay {self.relay_id}: bandwidth must be > 0")
        if self.is_exit and not self.exit_policy:
            raise ValueError(f"relay {self.relay_id}: exit relay needs a non-empty exit policy")
        _check_position(self.position)

    @property
    def key(self) -> str:
        return f"R{self.relay_id}"


@dataclass(frozen=True)
class EndpointDescriptor:
    """A client, destination server, or directory host."""

    endpoint_id: int
    kind: str  # client | server | directory
    position: tuple
    bandwidth: float  # access bandwidth, KiB/s

    def __post_init__(self):
        if self.kind not in ("client", "server", "directory"):
            raise ValueError(f"unknown endpoint kind {self.kind!r}")
        _check_position(self.position)

    @property
    def key(self) -> str:
        return {"client": "C", "server": "S", "directory": "D"}[self.kind] + str(self.endpoint_id)


class PathSelectionError(Exception):
    """No eligible relay for some circuit position."""


def weighted_choice(relays: Sequence[RelayDescriptor], rng: RngStream) -> RelayDescriptor:
    """Pick one relay with probability proportional to its bandwidth."""
    total = 0.0
    cumulative = []
    for relay in relays:
        total += relay.bandwidth
        cumulative.append(total)
    x = rng.random() * total
    i = bisect_right(cumulative, x)
    if i >= len(relays):  # float edge when x == total
        i = len(relays) - 1
    return relays[i]


def select_path(
    consensus: Sequence[RelayDescriptor], port: int, rng: RngStream
) -> tuple[RelayDescriptor, RelayDescriptor, RelayDescriptor]:
    """Pick (guard, middle, exit), each bandwidth-weighted among eligible relays.

    The exit is chosen first among exits whose policy allows `port`, then the
    guard among guard-flagged relays, then the middle among whatever remains.
    The three relays are always distinct.
    """
    exits = [r for r in consensus if r.is_exit and port in r.exit_policy]
    if not exits:
        raise PathSelectionError(f"no exit allows port {port}")
    exit_relay = weighted_choice(exits, rng)

    guards = [r for r in consensus if r.is_guard and r.relay_id != exit_relay.relay_id]
    if not guards:
        raise PathSelectionError("no eligible guard")
    guard = weighted_choice(guards, rng)

    used = (guard.relay_id, exit_relay.relay_id)
    middles = [r for r in consensus if r.relay_id not in used]
    if not middles:
        raise PathSelectionError("no eligible middle")
    middle = weighted_choice(middles, rng)
    return guard, middle, exit_relay


@dataclass
class NetworkParams:
    """Latency/bandwidth/loss model constants."""

    processing_floor_ms: float = 2.0
    km_per_ms: float = 200.0
    jitter_mean_ms: float = 0.5
    packet_loss: float = 0.000025  # per-cell probability
    loss_retransmit_factor: float = 1.5  # penalty = factor * hop RTT per lost cell
    cell_bytes: int = 512  # on-the-wire cell size
    cell_payload_bytes: int = 498
    burst_cells: int = 250  # queue-claim granularity for multi-cell transfers
    circuit_window_cells: int = 500  # in-flight cap per stream (flow control)


@dataclass
class Topology:
    """All hosts in one simulated network."""

    relays: list = field(default_factory=list)
    clients: list = field(default_factory=list)
    servers: list = field(default_factory=list)
    directories: list = field(default_factory=list)

    def __post_init__(self):
        self._positions = {}
        self._bandwidths = {}
        for node in self.all_nodes():
            self._positions[node.key] = node.position
            self._bandwidths[node.key] = node.bandwidth

    def all_nodes(self) -> Iterable:
        yield from self.relays
        yield from self.clients
        yield from self.servers
        yield from self.directories

    def position(self, key: str) -> tuple:
        return self._positions[key]

    def bandwidth(self, key: str) -> float:
        return self._bandwidths[key]

    def relay(self, relay_id: int) -> RelayDescriptor:
        return self._relay_index()[relay_id]

    def _relay_index(self) -> dict:
        idx = getattr(self, "_relay_idx", None)
        if idx is None:
            idx = {r.relay_id: r for r in self.relays}
            self._relay_idx = idx
        return idx


class TransmitQueue:
    """Token-bucket transmit queue for one node.

    `busy_until` is the horizon of committed transmission work.  Admitting a
    chunk of k cells arriving over [first_in, last_in] queues k cell-services
    behind that work and returns the first and last cell departure times.  A
    chunk whose arrivals straggle slower than the line rate keeps its own tail
    (a cell cannot depart before arriving), but that idle tail is not charged
    to the queue, so later traffic only ever waits for real work.
    """

    __slots__ = ("busy_until", "_bytes_per_second")

    def __init__(self, bandwidth_kib: float):
        self.busy_until = 0
        self._bytes_per_second = bandwidth_kib * 1024.0

    def service_ticks(self, n_cells: int, cell_bytes: int) -> int:
        return int(n_cells * cell_bytes * TICKS_PER_SECOND // self._bytes_per_second)

    def admit(self, first_in: int, last_in: int, n_cells: int, cell_bytes: int):
        s1 = self.service_ticks(1, cell_bytes)
        start = max(first_in, self.busy_until)
        self.busy_until = start + self.service_ticks(n_cells, cell_bytes)
        first_out = start + s1
        last_out = max(self.busy_until, last_in + s1)
        return first_out, last_out


class Network:
    """Transport layer: moves cell chunks between nodes through their queues."""

    def __init__(
        self,
        topology: Topology,
        engine: Engine,
        params: NetworkParams,
        prop_override_ms: Optional[dict] = None,
    ):
        self.topology = topology
        self.engine = engine
        self.params = params
        self.queues = {node.key: TransmitQueue(node.bandwidth) for node in topology.all_nodes()}
        self._jitter_rng = engine.rng("network.jitter")
        self._loss_rng = engine.rng("network.loss")
        self._prop_cache: dict = {}
        self._floor_ticks = ms_to_ticks(params.processing_floor_ms)
        if prop_override_ms:
            # Synthetic per-pair latencies (tests, degenerate setups); keys are
            # unordered node-key pairs, values one-way ms including any floor.
            for (a, b), ms in prop_override_ms.items():
                pair = (a, b) if a <= b else (b, a)
                self._prop_cache[pair] = ms_to_ticks(ms)

    def prop_ticks(self, a: str, b: str) -> int:
        """Propagation delay in ticks between nodes a and b (processing floor included)."""
        pair = (a, b) if a <= b else (b, a)
        ticks = self._prop_cache.get(pair)
        if ticks is None:
            km = great_circle_km(self.topology.position(a), self.topology.position(b))
            ticks = ms_to_ticks(km / self.params.km_per_ms) + self._floor_ticks
            self._prop_cache[pair] = ticks
        return ticks

    def _jitter_ticks(self) -> int:
        mean = self.params.jitter_mean_ms
        if mean <= 0:
            return 0
        return ms_to_ticks(self._jitter_rng.expovariate(1.0 / mean))

    def _loss_count(self, n_cells: int) -> int:
        """Number of lost cells in a chunk; one uniform draw, CDF inversion."""
        p = self.params.packet_loss
        if p <= 0.0:
            return 0
        u = self._loss_rng.random()
        prob = (1.0 - p) ** n_cells
        cumulative = prob
        lost = 0
        while u > cumulative and lost < n_cells:
            lost += 1
            prob *= (n_cells - lost + 1) / lost * p / (1.0 - p)
            cumulative += prob
        return lost

    def one_way_latency_ms(self, a: str, b: str) -> float:
        """Sample the current one-cell latency a -> b without occupying the queue.

        Waiting time behind a's queued traffic, one cell of transmission, the
        propagation floor, and a jitter draw; never below the propagation term.
        """
        queue = self.queues[a]
        wait = max(0, queue.busy_until - self.engine.now)
        service = queue.service_ticks(1, self.params.cell_bytes)
        return ticks_to_ms(wait + service + self.prop_ticks(a, b) + self._jitter_ticks())

    def send(
        self,
        route: Sequence[str],
        n_cells: int,
        on_done: Callable[[int], None],
        on_first: Optional[Callable[[int], None]] = None,
        kind: str = "cell",
    ) -> None:
        """Move a chunk of cells along `route`, firing on_done at last-cell arrival.

        Each hop claims the sender's transmit queue and adds propagation,
        jitter, and a retransmission penalty for any cells the loss draw
        discards.  One event per leg, fired at the chunk's arrival there, so
        traffic competes for queue capacity when its cells are physically
        present (the reservation ahead of true arrival is bounded by one leg).
        `on_first` is called inline with the first cell's arrival tick at the
        final node; on_done fires as an event at the last cell's arrival.
        """
        now = self.engine.now
        self._leg(route, 0, n_cells, now, now, on_done, on_first, kind)

    def _leg(self, route, i, n_cells, first_in, last_in, on_done, on_first, kind):
        first_out, last_out = self.queues[route[i]].admit(
            first_in, last_in, n_cells, self.params.cell_bytes
        )
        leg = self.prop_ticks(route[i], route[i + 1]) + self._jitter_ticks()
        first_arr = first_out + leg
        last_arr = last_out + leg
        lost = self._loss_count(n_cells)
        if lost:
            last_arr += lost * round(self.params.loss_retransmit_factor * 2 * leg)
            if n_cells == 1:
                first_arr = last_arr
        if i + 2 == len(route):
            if on_first is not None:
                on_first(first_arr)
            self.engine.schedule_at(max(self.engine.now, last_arr), kind, lambda: on_done(last_arr))
        else:
            self.engine.schedule_at(
                max(self.engine.now, last_arr),
                kind,
                lambda: self._leg(route, i + 1, n_cells, first_arr, last_arr, on_done, on_first, kind),
            )


# --- Topology generation and file round-trip -------------------------------


@dataclass
class RegionCluster:
    name: str
    lat: float
    lon: float
    weight: float
    spread_deg: float = 3.0


@dataclass
class TopologyGenConfig:
    """Knobs for the synthetic topology generator.

    Relay bandwidths come from a log-normal stand-in for the live network's
    distribution; the exact measured values are not available, so the
    parameters here are a calibration default, not ground truth.
    """

    guards: int = 10
    exits: int = 10
    exit_guards: int = 2  # of the exits, how many also carry the guard flag
    middles: int = 24
    clients: int = 220
    servers: int = 44
    exit_policy_ports: tuple = (80, 443)
    relay_bw_lognorm_mu: float = 9.0  # ln(KiB/s)
    relay_bw_lognorm_sigma: float = 1.0
    relay_bw_min_kib: float = 200.0
    relay_bw_max_kib: float = 200_000.0
    client_bw_kib: float = 6_250.0
    server_bw_kib: float = 62_500.0
    clusters: tuple = ()


DEFAULT_CLUSTERS = (
    RegionCluster("frankfurt", 50.1, 8.7, 0.18),
    RegionCluster("paris", 48.9, 2.4, 0.10),
    RegionCluster("amsterdam", 52.4, 4.9, 0.08),
    RegionCluster("london", 51.5, -0.1, 0.07),
    RegionCluster("stockholm", 59.3, 18.1, 0.05),
    RegionCluster("zurich", 47.4, 8.5, 0.05),
    RegionCluster("warsaw", 52.2, 21.0, 0.05),
    RegionCluster("moscow", 55.8, 37.6, 0.07),
    RegionCluster("us-east", 40.7, -74.0, 0.14),
    RegionCluster("us-west", 37.8, -122.4, 0.08),
    RegionCluster("toronto", 43.7, -79.4, 0.04),
    RegionCluster("sao-paulo", -23.5, -46.6, 0.03),
    RegionCluster("tokyo", 35.7, 139.7, 0.03),
    RegionCluster("singapore", 1.35, 103.8, 0.02),
    RegionCluster("sydney", -33.9, 151.2, 0.01),
)


def _sample_position(clusters: Sequence[RegionCluster], rng: RngStream) -> tuple:
    total = sum(c.weight for c in clusters)
    x = rng.random() * total
    acc = 0.0
    chosen = clusters[-1]
    for cluster in clusters:
        acc += cluster.weight
        if x < acc:
            chosen = cluster
            break
    lat = min(89.0, max(-89.0, rng.gauss(chosen.lat, chosen.spread_deg)))
    lon = rng.gauss(chosen.lon, chosen.spread_deg)
    lon = (lon + 180.0) % 360.0 - 180.0
    return (round(lat, 4), round(lon, 4))


def _sample_relay_bw(cfg: TopologyGenConfig, rng: RngStream) -> float:
    bw = rng.lognormvariate(cfg.relay_bw_lognorm_mu, cfg.relay_bw_lognorm_sigma)
    return round(min(cfg.relay_bw_max_kib, max(cfg.relay_bw_min_kib, bw)), 1)


def generate_topology(cfg: TopologyGenConfig, rng: RngStream) -> Topology:
    """Build a synthetic relay/client/server population from `cfg`."""
    clusters = cfg.clusters or DEFAULT_CLUSTERS
    policy = frozenset(cfg.exit_policy_ports)
    relays = []
    next_id = 0
    for i in range(cfg.exits):
        relays.append(
            RelayDescriptor(
                relay_id=next_id,
                bandwidth=_sample_relay_bw(cfg, rng),
                is_guard=i < cfg.exit_guards,
                is_exit=True,
                position=_sample_position(clusters, rng),
                exit_policy=policy,
            )
        )
        next_id += 1
    for _ in range(cfg.guards):
        relays.append(
            RelayDescriptor(
                relay_id=next_id,
                bandwidth=_sample_relay_bw(cfg, rng),
                is_guard=True,
                is_exit=False,
                position=_sample_position(clusters, rng),
            )
        )
        next_id += 1
    for _ in range(cfg.middles):
        relays.append(
            RelayDescriptor(
                relay_id=next_id,
                bandwidth=_sample_relay_bw(cfg, rng),
                is_guard=False,
                is_exit=False,
                position=_sample_position(clusters, rng),
            )
        )
        next_id += 1

    clients = [
        EndpointDescriptor(i, "client", _sample_position(clusters, rng), cfg.client_bw_kib)
        for i in range(cfg.clients)
    ]
    servers = [
        EndpointDescriptor(i, "server", _sample_position(clusters, rng), cfg.server_bw_kib)
        for i in range(cfg.servers)
    ]
    return Topology(relays=relays, clients=clients, servers=servers)


def save_topology(topology: Topology, path) -> None:
    doc = {
        "relays": [
            {
                "id": r.relay_id,
                "bandwidth_kib": r.bandwidth,
                "guard": r.is_guard,
                "exit": r.is_exit,
                "lat": r.position[0],
                "lon": r.position[1],
                "policy": sorted(r.exit_policy),
            }
            for r in topology.relays
        ],
        "clients": [_endpoint_doc(e) for e in topology.clients],
        "servers": [_endpoint_doc(e) for e in topology.servers],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def _endpoint_doc(e: EndpointDescriptor) -> dict:
    return {"id": e.endpoint_id, "lat": e.position[0], "lon": e.position[1], "bandwidth_kib": e.bandwidth}


def load_topology(path) -> Topology:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    relays = [
        RelayDescriptor(
            relay_id=int(r["id"]),
            bandwidth=float(r["bandwidth_kib"]),
            is_guard=bool(r["guard"]),
            is_exit=bool(r["exit"]),
            position=(float(r["lat"]), float(r["lon"])),
            exit_policy=frozenset(int(p) for p in r.get("policy", [])),
        )
        for r in doc["relays"]
    ]
    clients = [_endpoint_from_doc(e, "client") for e in doc.get("clients", [])]
    servers = [_endpoint_from_doc(e, "server") for e in doc.get("servers", [])]
    return Topology(relays=relays, clients=clients, servers=servers)


def _endpoint_from_doc(e: dict, kind: str) -> EndpointDescriptor:
    return EndpointDescriptor(
        endpoint_id=int(e["id"]),
        kind=kind,
        position=(float(e["lat"]), float(e["lon"])),
        bandwidth=float(e["bandwidth_kib"]),
    )
