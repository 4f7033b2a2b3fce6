"""Client-side circuit pool: replenishment to N, dirty marking, unused reaping.

The pool is pure bookkeeping driven by the simulation's once-per-second tick;
it owns no events itself, which keeps every rule (10-minute dirty clock,
5-minute unused reaping, per-port replenishment) directly testable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .circuits import Circuit, STATE_BUILDING, STATE_CLOSED, STATE_DIRTY, STATE_OPEN
from .engine import s_to_ticks

# Unmodified client behavior keeps at least two open circuits.
VANILLA_TARGET = 2


@dataclass
class PoolConfig:
    """Pool policy; target_n=None means the unchanged baseline (two circuits)."""

    target_n: Optional[int] = None
    dirty_after_s: float = 600.0
    reap_unused_after_s: float = 300.0
    replenish_interval_s: float = 1.0
    port_memory_s: float = 3600.0
    reap_enabled: bool = True
    unused_open_cap: int = 14  # max never-used open circuits kept per client

    def __post_init__(self):
        for name in ("dirty_after_s", "reap_unused_after_s", "replenish_interval_s", "port_memory_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.target_n is not None and self.target_n < 1:
            raise ValueError("target_n must be >= 1")
        if self.unused_open_cap < 1:
            raise ValueError("unused_open_cap must be >= 1")

    @property
    def target(self) -> int:
        return VANILLA_TARGET if self.target_n is None else self.target_n


class CircuitPool:
    """All circuits one client maintains, plus its recently-used port classes."""

    def __init__(self, client_key: str, config: PoolConfig, seed_ports=(), now: int = 0):
        self.client_key = client_key
        self.config = config
        self.circuits: dict = {}  # circuit_id -> Circuit, ascending ids
        self.ports: dict = {int(p): now for p in seed_ports}  # port -> last_used ticks
        self._dirty_after = s_to_ticks(config.dirty_after_s)
        self._reap_after = s_to_ticks(config.reap_unused_after_s)
        self._port_memory = s_to_ticks(config.port_memory_s)
        self.builds_requested = 0
        self.builds_failed = 0

    def add(self, circuit: Circuit) -> None:
        self.circuits[circuit.circuit_id] = circuit

    def note_port(self, port: int, now: int) -> None:
        self.ports[port] = now

    def expire_ports(self, now: int) -> None:
        stale = [p for p, t in self.ports.items() if now - t > self._port_memory]
        for p in stale:
            del self.ports[p]

    def live_circuits(self):
        return [c for c in self.circuits.values() if c.state in (STATE_BUILDING, STATE_OPEN, STATE_DIRTY)]

    def clean_count(self, port: int) -> int:
        """Open or in-flight circuits usable for new streams on this port."""
        return sum(
            1
            for c in self.circuits.values()
            if c.state in (STATE_BUILDING, STATE_OPEN)
            and not c.abandoned
            and c.supports_port(port)
        )

    def deficits(self) -> list:
        """(port, missing-count) per remembered port, in ascending port order."""
        target = self.config.target
        out = []
        for port in sorted(self.ports):
            missing = target - self.clean_count(port)
            if missing > 0:
                out.append((port, missing))
        return out

    def replenish(self, now: int, start_build: Callable[[int], Optional[Circuit]]) -> list:
        """Bring every remembered port class up to the target circuit count.

        `start_build(port)` must register and return a new building circuit (or
        None on path-construction failure, in which case the port is retried on
        the next tick).  Ports are processed in ascending order and counts are
        re-checked after every build, so one new circuit can satisfy several
        port classes at once.
        """
        started = []
        target = self.config.target
        for port in sorted(self.ports):
            while self.clean_count(port) < target:
                circuit = start_build(port)
                if circuit is None:
                    self.builds_failed += 1
                    break
                self.builds_requested += 1
                started.append(circuit)
        return started

    def mark_dirty(self, now: int) -> list:
        """Move circuits used for 10 minutes out of the candidate set."""
        changed = []
        for c in self.circuits.values():
            if (
                c.state == STATE_OPEN
                and c.first_used_at is not None
                and now - c.first_used_at >= self._dirty_after
            ):
                c.transition(STATE_DIRTY, now)
                changed.append(c)
        return changed

    def close_drained_dirty(self, now: int) -> list:
        """Dirty circuits stay up only while they still carry streams."""
        closed = []
        for c in self.circuits.values():
            if c.state == STATE_DIRTY and c.active_streams == 0:
                c.transition(STATE_CLOSED, now, reason="dirty-drained")
                closed.append(c)
        return closed

    def reap_unused(self, now: int) -> list:
        """Close circuits that never carried a stream within five minutes of creation."""
        if not self.config.reap_enabled:
            return []
        closed = []
        for c in self.circuits.values():
            if (
                c.state == STATE_OPEN
                and c.first_used_at is None
                and c.built_at is not None
                and now - c.built_at >= self._reap_after
            ):
                c.transition(STATE_CLOSED, now, reason="reaped")
                closed.append(c)
        return closed

    def enforce_unused_cap(self, now: int) -> list:
        """Close the oldest never-used open circuits beyond the per-client cap.

        Keeps abandoned or otherwise idle circuits from piling up without
        bound; replacement builds remain subject to the target count.
        """
        unused = [
            c for c in self.circuits.values() if c.state == STATE_OPEN and c.first_used_at is None
        ]
        closed = []
        excess = len(unused) - self.config.unused_open_cap
        for c in unused[:max(0, excess)]:  # ascending id == oldest first
            c.transition(STATE_CLOSED, now, reason="idle-excess")
            closed.append(c)
        return closed

    def candidates(self, port: int) -> list:
        """Open, non-dirty, non-abandoned circuits supporting `port`, ascending id."""
        return [
            c
            for c in self.circuits.values()
            if c.state == STATE_OPEN and not c.abandoned and c.supports_port(port)
        ]

    def prune_closed(self) -> list:
        """Drop closed circuits from the working set (callers keep their own log)."""
        closed = [c for c in self.circuits.values() if c.state == STATE_CLOSED]
        for c in closed:
            del self.circuits[c.circuit_id]
        return closed

    def counts_by_state(self) -> dict:
        counts = {STATE_BUILDING: 0, STATE_OPEN: 0, STATE_DIRTY: 0, "closed": 0}
        for c in self.circuits.values():
            counts[c.state] = counts.get(c.state, 0) + 1
        return counts
