"""One simulation instance: clients, pools, builds, probes, streams, logs.

The instance owns a single event loop.  A once-per-second maintenance tick
drives pool upkeep (port expiry, dirty marking, reaping, replenishment, idle
probes); everything else is event-chained cell traffic.  Instances share
nothing and can run in parallel processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .circuits import (
    Circuit,
    CircuitBuilder,
    RttSample,
    SOURCE_ATTACH,
    STATE_DIRTY,
    STATE_OPEN,
)
from .engine import Engine, s_to_ticks, ticks_to_ms, ticks_to_s
from .network import Network, PathSelectionError, Topology, select_path
from .pool import CircuitPool, PoolConfig
from .strategies import (
    BASELINE_IDS,
    CAR,
    CircuitScore,
    VANILLA,
    car_abandon_check,
    select,
)
from .traffic import (
    BULK_PROFILE,
    OUTCOME_COMPLETED,
    StreamRecord,
    WEB,
    WEB_PROFILE,
    aggregate,
)


@dataclass
class SimOutput:
    """Everything one run produces, still in memory."""

    seed: int
    records: list = field(default_factory=list)
    circuits: list = field(default_factory=list)
    pool_rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    topology: Optional[Topology] = None


class Simulation:
    def __init__(self, cfg, topology: Topology, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.engine = Engine(seed=seed)
        self.topology = topology
        self.network = Network(topology, self.engine, cfg.net)
        self.builder = CircuitBuilder(
            self.engine,
            self.network,
            handshake_timeout_s=cfg.handshake_timeout_s,
            probe_timeout_s=cfg.probe_timeout_s,
        )
        self.strategy = cfg.strategy
        self.path_rng = self.engine.rng("network.path")
        self.traffic_rng = self.engine.rng("traffic")
        self.car_rng = self.engine.rng("strategy.car")

        self.duration_ticks = s_to_ticks(cfg.duration_s)
        self.warmup_ticks = s_to_ticks(cfg.duration_s * cfg.warmup_fraction)
        self.attach_timeout = s_to_ticks(cfg.attach_timeout_s)
        self.probe_interval = s_to_ticks(cfg.probe_interval_s)
        self.probes_enabled = cfg.probes_enabled_for(self.strategy)
        self.replenish_ticks = s_to_ticks(cfg.pool.replenish_interval_s)
        self.snapshot_ticks = s_to_ticks(cfg.pool_snapshot_interval_s)
        self.cell_payload = cfg.net.cell_payload_bytes
        self.burst_cells = cfg.net.burst_cells
        self.window_cells = cfg.net.circuit_window_cells

        self._next_circuit_id = 0
        self._next_stream_id = 0
        self.records: list = []
        self.all_circuits: list = []
        self.pool_rows: list = []
        self.build_failures = 0
        self._exit_server_km: dict = {}

        pool_cfg = PoolConfig(
            target_n=cfg.circuits,
            dirty_after_s=cfg.pool.dirty_after_s,
            reap_unused_after_s=cfg.pool.reap_unused_after_s,
            replenish_interval_s=cfg.pool.replenish_interval_s,
            port_memory_s=cfg.pool.port_memory_s,
            reap_enabled=self.strategy not in BASELINE_IDS,
            unused_open_cap=cfg.pool.unused_open_cap,
        )
        spread = s_to_ticks(cfg.client_start_spread_s)
        n_clients = len(topology.clients)
        self.clients = []
        for i, endpoint in enumerate(topology.clients):
            base = WEB_PROFILE if i < cfg.web_clients else BULK_PROFILE
            profile = base.__class__(
                kind=base.kind,
                download_kib=cfg.web_download_kib if base.kind == WEB else cfg.bulk_download_kib,
                think_range_s=cfg.web_think_s if base.kind == WEB else None,
                port=cfg.request_port,
            )
            start = spread * i // max(1, n_clients)
            self.clients.append(
                _ClientState(
                    index=i,
                    key=endpoint.key,
                    profile=profile,
                    pool=CircuitPool(endpoint.key, pool_cfg, cfg.pool.seed_ports, now=start),
                    start_ticks=start,
                )
            )

    # -- circuit construction ------------------------------------------------

    def _start_build(self, client: "_ClientState", port: int) -> Optional[Circuit]:
        try:
            path = select_path(self.topology.relays, port, self.path_rng)
        except PathSelectionError:
            return None
        circuit = Circuit(
            circuit_id=self._next_circuit_id,
            client_key=client.key,
            path=path,
            client_position=self.topology.position(client.key),
            requested_at=self.engine.now,
        )
        self._next_circuit_id += 1
        client.pool.add(circuit)
        self.all_circuits.append(circuit)
        self.builder.build(circuit, on_open=lambda c: self._circuit_opened(client, c),
                           on_fail=self._build_failed)
        return circuit

    def _build_failed(self, circuit: Circuit) -> None:
        self.build_failures += 1

    def _circuit_opened(self, client: "_ClientState", circuit: Circuit) -> None:
        self._drain_waiting(client)

    # -- selection ------------------------------------------------------------

    def _score(self, circuit: Circuit, dest_pos) -> CircuitScore:
        if dest_pos is None:
            length = circuit.static_length_km
        else:
            pair = (circuit.exit.relay_id, dest_pos)
            length = self._exit_server_km.get(pair)
            if length is None:
                length = circuit.geo_length(dest_pos) - circuit.static_length_km
                self._exit_server_km[pair] = length
            length += circuit.static_length_km
        return CircuitScore(circuit.circuit_id, circuit.mean_rtt(), circuit.congestion_time(), length)

    def _pick_circuit(self, client: "_ClientState", port: int, server_key: str) -> Optional[Circuit]:
        candidates = client.pool.candidates(port)
        if self.strategy == CAR:
            candidates = self._apply_car_abandonment(candidates)
        if not candidates:
            return None
        if self.strategy == VANILLA:
            return candidates[0]  # ascending id == oldest clean circuit
        dest_pos = self.topology.position(server_key) if self.cfg.length_uses_destination else None
        scores = [self._score(c, dest_pos) for c in candidates]
        chosen = select(self.strategy, scores, rng=self.car_rng,
                        car_sample_size=self.cfg.car_sample_size)
        return client.pool.circuits[chosen]

    def _apply_car_abandonment(self, circuits: list) -> list:
        keep = []
        for c in circuits:
            mc = c.congestion_time()
            if mc is not None and mc > self.cfg.car_abandon_ms:
                c.abandoned = True
            else:
                keep.append(c)
        return keep

    # -- stream lifecycle -----------------------------------------------------

    def _start_request(self, client: "_ClientState") -> None:
        now = self.engine.now
        server = self.topology.servers[self.traffic_rng.randrange(len(self.topology.servers))]
        record = StreamRecord(
            stream_id=self._next_stream_id,
            client_id=client.index,
            kind=client.profile.kind,
            server_id=server.endpoint_id,
            port=client.profile.port,
            requested_at=now,
        )
        self._next_stream_id += 1
        self.records.append(record)
        client.pool.note_port(record.port, now)
        if not self._try_attach(client, record):
            client.waiting.append(record)
            self.engine.schedule_in(
                self.attach_timeout, "attach-timeout", lambda: self._attach_timeout(client, record)
            )

    def _try_attach(self, client: "_ClientState", record: StreamRecord) -> bool:
        server_key = f"S{record.server_id}"
        circuit = self._pick_circuit(client, record.port, server_key)
        if circuit is None:
            return False
        self._attach(client, record, circuit)
        return True

    def _drain_waiting(self, client: "_ClientState") -> None:
        while client.waiting:
            record = client.waiting[0]
            if not self._try_attach(client, record):
                return
            client.waiting.pop(0)

    def _attach_timeout(self, client: "_ClientState", record: StreamRecord) -> None:
        if record.circuit_attached_at is not None:
            return
        if record in client.waiting:
            client.waiting.remove(record)
        # outcome stays "failed"; the client moves on
        self._schedule_next_request(client)

    def _attach(self, client: "_ClientState", record: StreamRecord, circuit: Circuit) -> None:
        now = self.engine.now
        record.circuit_attached_at = now
        record.circuit_id = circuit.circuit_id
        record.guard_id = circuit.guard.relay_id
        record.middle_id = circuit.middle.relay_id
        record.exit_id = circuit.exit.relay_id
        circuit.mark_used(now)

        client_key = client.key
        server_key = f"S{record.server_id}"
        guard_key, middle_key, exit_key = circuit.path_keys
        sent = now

        def connected_back(arrival: int) -> None:
            # Opportunistic measurement: stream-open cell out, connected cell back.
            if circuit.state in (STATE_OPEN, STATE_DIRTY):
                circuit.record_rtt(RttSample(ticks_to_ms(arrival - sent), arrival, SOURCE_ATTACH))

        def request_at_exit(_arrival: int) -> None:
            self.network.send(
                [exit_key, middle_key, guard_key, client_key], 1, connected_back, kind="connected"
            )
            self.network.send([exit_key, server_key], 1, at_server, kind="request")

        def at_server(_arrival: int) -> None:
            self._serve_response(client, record, circuit, server_key)

        self.network.send(
            [client_key, guard_key, middle_key, exit_key], 1, request_at_exit, kind="request"
        )

    def _serve_response(self, client, record, circuit, server_key) -> None:
        """Deliver the download in flow-controlled windows.

        The server releases one window of cells, the client acknowledges its
        arrival with a single cell back through the circuit, and the next
        window leaves on that ack, capping in-flight data per stream the way
        circuit-level flow control does.  Windows move as chunk sends so one
        stream cannot monopolize a relay queue for the whole transfer.
        """
        down = [server_key, circuit.exit.key, circuit.middle.key, circuit.guard.key, client.key]
        up = [client.key, circuit.guard.key, circuit.middle.key, circuit.exit.key, server_key]
        cells_left = math.ceil(record_download_bytes(client.profile) / self.cell_payload)
        state = {"sent_first": False, "last": 0, "chunks": 0}

        def first_byte(arrival: int) -> None:
            record.first_byte_at = arrival

        def send_window() -> None:
            nonlocal cells_left
            window = min(self.window_cells, cells_left)
            cells_left -= window
            chunks = []
            while window > 0:
                n = min(self.burst_cells, window)
                chunks.append(n)
                window -= n
            state["chunks"] = len(chunks)
            for i, n in enumerate(chunks):
                self.network.send(
                    down, n, chunk_done,
                    on_first=None if state["sent_first"] or i else first_byte,
                    kind="data",
                )
            state["sent_first"] = True

        def chunk_done(arrival: int) -> None:
            state["chunks"] -= 1
            state["last"] = max(state["last"], arrival)
            if state["chunks"]:
                return
            if cells_left:
                self.network.send(up, 1, lambda _t: send_window(), kind="ack")
            else:
                self._finish_stream(client, record, circuit, state["last"])

        send_window()

    def _finish_stream(self, client, record, circuit, last_byte: int) -> None:
        record.last_byte_at = last_byte
        record.outcome = OUTCOME_COMPLETED
        record.check_ordering()
        circuit.stream_finished()
        self._schedule_next_request(client)

    def _schedule_next_request(self, client: "_ClientState") -> None:
        think = client.profile.think_range_s
        delay = 0 if think is None else s_to_ticks(self.traffic_rng.uniform(*think))
        self.engine.schedule_in(delay, "stream-start", lambda: self._start_request(client))

    # -- maintenance tick -------------------------------------------------------

    def _tick(self) -> None:
        now = self.engine.now
        for client in self.clients:
            if now < client.start_ticks:
                continue
            pool = client.pool
            pool.expire_ports(now)
            pool.mark_dirty(now)
            pool.close_drained_dirty(now)
            if self.strategy == CAR:
                self._apply_car_abandonment(
                    [c for c in pool.circuits.values() if c.state == STATE_OPEN]
                )
            pool.reap_unused(now)
            pool.enforce_unused_cap(now)
            pool.replenish(now, lambda port, _c=client: self._start_build(_c, port))
            if self.probes_enabled:
                for c in pool.circuits.values():
                    if (
                        c.state == STATE_OPEN
                        and not c.abandoned
                        and not c.probe_inflight
                        and now - c.last_activity >= self.probe_interval
                    ):
                        self.builder.probe(c)
            pool.prune_closed()
        if now + self.replenish_ticks <= self.duration_ticks:
            self.engine.schedule_in(self.replenish_ticks, "timer-tick", self._tick)

    def _snapshot(self) -> None:
        counts = {"building": 0, "open": 0, "dirty": 0}
        ports = list(self.cfg.pool.seed_ports)
        clean = {p: 0 for p in ports}
        for client in self.clients:
            for c in client.pool.circuits.values():
                if c.state in counts:
                    counts[c.state] += 1
            for p in ports:
                clean[p] += client.pool.clean_count(p)
        closed_total = sum(1 for c in self.all_circuits if c.state == "closed")
        self.pool_rows.append(
            (
                ticks_to_s(self.engine.now),
                counts["building"],
                counts["open"],
                counts["dirty"],
                closed_total,
                *[clean[p] for p in ports],
            )
        )
        if self.engine.now + self.snapshot_ticks <= self.duration_ticks:
            self.engine.schedule_in(self.snapshot_ticks, "pool-snapshot", self._snapshot)

    # -- run --------------------------------------------------------------------

    def run(self) -> SimOutput:
        for client in self.clients:
            self.engine.schedule_at(
                client.start_ticks, "stream-start", lambda c=client: self._start_request(c)
            )
        self.engine.schedule_at(0, "timer-tick", self._tick)
        self.engine.schedule_at(0, "pool-snapshot", self._snapshot)
        summary_engine = self.engine.run_until(self.duration_ticks)

        summary = aggregate(self.records, self.all_circuits, self.warmup_ticks)
        summary["seed"] = self.seed
        summary["strategy"] = self.strategy
        summary["circuits_target"] = self.cfg.circuits
        summary["duration_s"] = self.cfg.duration_s
        summary["events_dispatched"] = summary_engine.events_dispatched
        summary["build_failures"] = self.build_failures
        summary["circuits_built_total"] = sum(1 for c in self.all_circuits if c.built_at is not None)
        return SimOutput(
            seed=self.seed,
            records=self.records,
            circuits=self.all_circuits,
            pool_rows=self.pool_rows,
            summary=summary,
            topology=self.topology,
        )


def record_download_bytes(profile) -> int:
    return profile.download_kib * 1024


@dataclass
class _ClientState:
    index: int
    key: str
    profile: object
    pool: CircuitPool
    start_ticks: int
    waiting: list = field(default_factory=list)
