"""Circuit lifecycle, per-circuit latency measurements, and geographic length.

A circuit keeps the last five RTT samples and, alongside each sample, the
congestion time computed against the minimum RTT known when the sample was
taken (so a later, lower minimum never rewrites history).  Circuit congestion
is the mean of those stored per-sample values; circuit RTT is the mean of the
raw samples.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .engine import Engine, s_to_ticks, ticks_to_ms
from .network import Network, RelayDescriptor, great_circle_km

STATE_BUILDING = "building"
STATE_OPEN = "open"
STATE_DIRTY = "dirty"
STATE_CLOSED = "closed"

SOURCE_BUILD = "build-handshake"
SOURCE_ATTACH = "stream-attach"
SOURCE_PROBE = "idle-probe"

_ALLOWED_TRANSITIONS = {
    STATE_BUILDING: (STATE_OPEN, STATE_CLOSED),
    STATE_OPEN: (STATE_DIRTY, STATE_CLOSED),
    STATE_DIRTY: (STATE_CLOSED,),
    STATE_CLOSED: (),
}

RTT_WINDOW = 5


@dataclass(frozen=True)
class RttSample:
    value_ms: float
    measured_at: int  # ticks
    source: str

    def __post_init__(self):
        if self.value_ms <= 0:
            raise ValueError("RTT sample must be positive")


class Circuit:
    """A three-hop circuit owned by one client."""

    __slots__ = (
        "circuit_id",
        "client_key",
        "guard",
        "middle",
        "exit",
        "state",
        "requested_at",
        "built_at",
        "first_used_at",
        "last_used_at",
        "closed_at",
        "close_reason",
        "rtt_window",
        "tc_window",
        "rtt_min",
        "static_length_km",
        "active_streams",
        "stream_count",
        "abandoned",
        "probe_inflight",
        "last_activity",
        "sample_log",
    )

    def __init__(
        self,
        circuit_id: int,
        client_key: str,
        path: tuple,
        client_position: tuple,
        requested_at: int,
    ):
        guard, middle, exit_relay = path
        self.circuit_id = circuit_id
        self.client_key = client_key
        self.guard: RelayDescriptor = guard
        self.middle: RelayDescriptor = middle
        self.exit: RelayDescriptor = exit_relay
        self.state = STATE_BUILDING
        self.requested_at = requested_at
        self.built_at: Optional[int] = None
        self.first_used_at: Optional[int] = None
        self.last_used_at: Optional[int] = None
        self.closed_at: Optional[int] = None
        self.close_reason: Optional[str] = None
        self.rtt_window: deque = deque(maxlen=RTT_WINDOW)
        self.tc_window: deque = deque(maxlen=RTT_WINDOW)
        self.rtt_min: Optional[float] = None
        self.static_length_km = (
            great_circle_km(client_position, guard.position)
            + great_circle_km(guard.position, middle.position)
            + great_circle_km(middle.position, exit_relay.position)
        )
        self.active_streams = 0
        self.stream_count = 0
        self.abandoned = False
        self.probe_inflight = False
        self.last_activity = requested_at
        self.sample_log: list = []

    def transition(self, new_state: str, now: int, reason: Optional[str] = None) -> None:
        if new_state not in _ALLOWED_TRANSITIONS[self.state]:
            raise ValueError(f"circuit {self.circuit_id}: illegal {self.state} -> {new_state}")
        self.state = new_state
        if new_state == STATE_OPEN:
            self.built_at = now
            self.last_activity = now
        elif new_state == STATE_CLOSED:
            self.closed_at = now
            self.close_reason = reason

    def record_rtt(self, sample: RttSample) -> None:
        """Append a sample; congestion for it uses the running minimum at this moment."""
        if self.state not in (STATE_OPEN, STATE_DIRTY):
            raise ValueError(f"circuit {self.circuit_id}: cannot record RTT while {self.state}")
        if self.rtt_min is None or sample.value_ms < self.rtt_min:
            self.rtt_min = sample.value_ms
        self.rtt_window.append(sample)
        tc = sample.value_ms - self.rtt_min  # >= 0 because rtt_min was just updated
        self.tc_window.append(tc)
        self.last_activity = max(self.last_activity, sample.measured_at)
        self.sample_log.append((sample.measured_at, sample.value_ms, sample.source, tc))

    def mean_rtt(self) -> Optional[float]:
        """Mean of the last five RTT samples; None while unmeasured."""
        if not self.rtt_window:
            return None
        return sum(s.value_ms for s in self.rtt_window) / len(self.rtt_window)

    def congestion_time(self) -> Optional[float]:
        """Mean of the last five per-sample congestion times; None while unmeasured."""
        if not self.tc_window:
            return None
        return sum(self.tc_window) / len(self.tc_window)

    def mark_used(self, now: int) -> None:
        if self.first_used_at is None:
            self.first_used_at = now
        self.last_used_at = now
        self.last_activity = now
        self.active_streams += 1
        self.stream_count += 1

    def stream_finished(self) -> None:
        self.active_streams -= 1

    def supports_port(self, port: int) -> bool:
        return port in self.exit.exit_policy

    @property
    def path_keys(self) -> tuple:
        return (self.guard.key, self.middle.key, self.exit.key)

    def geo_length(self, destination: Optional[tuple] = None) -> float:
        """Geographic length in km: the three fixed segments plus the exit leg.

        With an unresolved destination the exit leg contributes nothing, so
        candidates are compared on client-to-exit geography alone.
        """
        if destination is None:
            return self.static_length_km
        return self.static_length_km + great_circle_km(self.exit.position, destination)


def geo_length(
    client_pos: tuple,
    guard_pos: tuple,
    middle_pos: tuple,
    exit_pos: tuple,
    destination: Optional[tuple] = None,
) -> float:
    """Pure form of the circuit-length metric for callers without a Circuit."""
    total = (
        great_circle_km(client_pos, guard_pos)
        + great_circle_km(guard_pos, middle_pos)
        + great_circle_km(middle_pos, exit_pos)
    )
    if destination is not None:
        total += great_circle_km(exit_pos, destination)
    return total


class CircuitBuilder:
    """Runs the three-handshake build protocol and idle probes over the network.

    Handshake i is one full round trip from the client through hops 1..i, so
    the build cost telescopes; the third handshake's round-trip time becomes
    the circuit's first RTT sample.
    """

    def __init__(self, engine: Engine, network: Network, handshake_timeout_s: float = 60.0,
                 probe_timeout_s: float = 60.0):
        self.engine = engine
        self.network = network
        self.handshake_timeout = s_to_ticks(handshake_timeout_s)
        self.probe_timeout = s_to_ticks(probe_timeout_s)

    def build(
        self,
        circuit: Circuit,
        on_open: Callable[[Circuit], None],
        on_fail: Optional[Callable[[Circuit], None]] = None,
    ) -> None:
        deadline = self.engine.now + self.handshake_timeout
        client = circuit.client_key
        hops = list(circuit.path_keys)

        def handshake(i: int) -> None:
            sent = self.engine.now
            out = [client] + hops[: i + 1]
            round_trip = out + out[-2::-1]

            def done(arrival: int) -> None:
                if circuit.state != STATE_BUILDING:
                    return
                if arrival > deadline:
                    circuit.transition(STATE_CLOSED, self.engine.now, reason="handshake-timeout")
                    if on_fail is not None:
                        on_fail(circuit)
                    return
                if i + 1 == len(hops):
                    circuit.transition(STATE_OPEN, self.engine.now)
                    circuit.record_rtt(
                        RttSample(ticks_to_ms(arrival - sent), arrival, SOURCE_BUILD)
                    )
                    on_open(circuit)
                else:
                    handshake(i + 1)

            self.network.send(round_trip, 1, done, kind="handshake")

        handshake(0)

    def probe(self, circuit: Circuit, on_timeout: Optional[Callable[[Circuit], None]] = None) -> None:
        """One round-trip measurement cell to the exit and back."""
        if circuit.probe_inflight or circuit.state != STATE_OPEN:
            return
        circuit.probe_inflight = True
        sent = self.engine.now
        out = [circuit.client_key, *circuit.path_keys]
        round_trip = out + out[-2::-1]

        def done(arrival: int) -> None:
            circuit.probe_inflight = False
            if circuit.state not in (STATE_OPEN, STATE_DIRTY):
                return
            if arrival - sent > self.probe_timeout:
                circuit.transition(STATE_CLOSED, self.engine.now, reason="probe-timeout")
                if on_timeout is not None:
                    on_timeout(circuit)
                return
            circuit.record_rtt(RttSample(ticks_to_ms(arrival - sent), arrival, SOURCE_PROBE))

        self.network.send(round_trip, 1, done, kind="probe")
