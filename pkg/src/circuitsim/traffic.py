"""Client workload types, stream records, and end-of-run aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import median
from typing import Optional, Sequence

from .engine import ticks_to_s

WEB = "web"
BULK = "bulk"

OUTCOME_COMPLETED = "completed"
OUTCOME_FAILED = "failed"


@dataclass(frozen=True)
class ClientProfile:
    """What a client repeatedly downloads and how long it pauses in between."""

    kind: str
    download_kib: int
    think_range_s: Optional[tuple]  # (low, high) uniform seconds; None = no pause
    port: int = 80

    def __post_init__(self):
        if self.download_kib <= 0:
            raise ValueError("download size must be > 0")
        if self.think_range_s is not None and self.think_range_s[0] > self.think_range_s[1]:
            raise ValueError("think range low must be <= high")


WEB_PROFILE = ClientProfile(WEB, download_kib=320, think_range_s=(1.0, 20.0))
BULK_PROFILE = ClientProfile(BULK, download_kib=5120, think_range_s=None)


@dataclass
class StreamRecord:
    """One client request and the timestamps of its life (all in ticks)."""

    stream_id: int
    client_id: int
    kind: str
    server_id: int
    port: int
    requested_at: int
    circuit_attached_at: Optional[int] = None
    first_byte_at: Optional[int] = None
    last_byte_at: Optional[int] = None
    circuit_id: Optional[int] = None
    guard_id: Optional[int] = None
    middle_id: Optional[int] = None
    exit_id: Optional[int] = None
    outcome: str = OUTCOME_FAILED

    def check_ordering(self) -> None:
        if self.outcome != OUTCOME_COMPLETED:
            return
        stamps = (self.requested_at, self.circuit_attached_at, self.first_byte_at, self.last_byte_at)
        if any(s is None for s in stamps) or not all(a <= b for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"stream {self.stream_id}: timestamps out of order: {stamps}")


def ttfb(record: StreamRecord) -> float:
    """Seconds from request to first payload byte; completed records only."""
    if record.outcome != OUTCOME_COMPLETED:
        raise ValueError("TTFB undefined for failed streams")
    return ticks_to_s(record.first_byte_at - record.requested_at)


def ttlb(record: StreamRecord) -> float:
    """Seconds from request to last payload byte; completed records only."""
    if record.outcome != OUTCOME_COMPLETED:
        raise ValueError("TTLB undefined for failed streams")
    return ticks_to_s(record.last_byte_at - record.requested_at)


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation percentile of a non-empty sequence, q in [0, 100]."""
    ordered = sorted(values)
    if len(ordered) == 1:
        return ordered[0]
    pos = (len(ordered) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(ordered) - 1)
    frac = pos - lo
    return ordered[lo] * (1.0 - frac) + ordered[hi] * frac


def _distribution(values: Sequence[float]) -> dict:
    return {
        "count": len(values),
        "mean": sum(values) / len(values),
        "median": median(values),
        "p25": percentile(values, 25),
        "p75": percentile(values, 75),
        "p90": percentile(values, 90),
    }


def aggregate(
    records: Sequence[StreamRecord],
    circuits: Sequence,
    warmup_ticks: int,
) -> dict:
    """Per-kind latency and circuit-count summary, warm-up window excluded.

    Streams requested before `warmup_ticks` and circuits built before it are
    left out, mirroring the initialization period the experiments discard.
    """
    summary: dict = {"warmup_s": ticks_to_s(warmup_ticks), "kinds": {}}
    by_kind: dict = {}
    for rec in records:
        if rec.requested_at < warmup_ticks:
            continue
        by_kind.setdefault(rec.kind, []).append(rec)

    created_by_client: dict = {}
    used_by_client: dict = {}
    for c in circuits:
        if c.built_at is None or c.built_at < warmup_ticks:
            continue
        created_by_client[c.client_key] = created_by_client.get(c.client_key, 0) + 1
        if c.stream_count > 0:
            used_by_client[c.client_key] = used_by_client.get(c.client_key, 0) + 1

    for kind, recs in sorted(by_kind.items()):
        completed = [r for r in recs if r.outcome == OUTCOME_COMPLETED]
        failed = len(recs) - len(completed)
        entry: dict = {"streams": len(recs), "completed": len(completed), "failed": failed}
        if completed:
            entry["ttfb"] = _distribution([ttfb(r) for r in completed])
            entry["ttlb"] = _distribution([ttlb(r) for r in completed])
        client_keys = sorted({f"C{r.client_id}" for r in recs})
        created = [created_by_client.get(k, 0) for k in client_keys]
        used = [used_by_client.get(k, 0) for k in client_keys]
        if created:
            entry["circuits_created_median"] = median(created)
            entry["circuits_used_median"] = median(used)
        summary["kinds"][kind] = entry
    return summary


def cdf_points(values: Sequence[float]) -> list:
    """(value, cumulative probability) pairs, one per sorted observation."""
    ordered = sorted(values)
    n = len(ordered)
    return [(v, (i + 1) / n) for i, v in enumerate(ordered)]
