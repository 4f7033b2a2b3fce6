"""Stream-attachment strategies: the unchanged baseline, congestion-aware
sampling, and the nine deterministic metric-based pickers.

Every strategy except car is a pure function of the candidate scores; car
additionally consumes the caller's RNG stream.  Sampling happens over the
id-sorted candidate list, so permuting the input order never changes the
outcome for a fixed RNG state.  Unmeasured metric values sort after every
measured value, and all ties break toward the smaller circuit id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .engine import RngStream

VANILLA = "vanilla"
CAR = "car"
CONGESTION_ONLY = "congestion_only"
LENGTH_ONLY = "length_only"
RTT_ONLY = "rtt_only"
CONGESTION_THEN_LENGTH = "congestion_then_length"
RTT_THEN_LENGTH = "rtt_then_length"
LENGTH_THEN_CONGESTION = "length_then_congestion"
LENGTH_THEN_RTT = "length_then_rtt"
RTT_THEN_CONGESTION = "rtt_then_congestion"
CONGESTION_THEN_RTT = "congestion_then_rtt"

STRATEGY_IDS = (
    VANILLA,
    CAR,
    CONGESTION_ONLY,
    LENGTH_ONLY,
    RTT_ONLY,
    CONGESTION_THEN_LENGTH,
    RTT_THEN_LENGTH,
    LENGTH_THEN_CONGESTION,
    LENGTH_THEN_RTT,
    RTT_THEN_CONGESTION,
    CONGESTION_THEN_RTT,
)

# Baselines keep the unchanged circuit count and do not reap unused circuits.
BASELINE_IDS = (VANILLA, CAR)

CAR_SAMPLE_SIZE = 3
CAR_ABANDON_THRESHOLD_MS = 500.0

_METRIC_RTT = "rtt"
_METRIC_CONGESTION = "congestion"
_METRIC_LENGTH = "length"

_COMPOSITES = {
    CONGESTION_ONLY: (_METRIC_CONGESTION, None),
    LENGTH_ONLY: (_METRIC_LENGTH, None),
    RTT_ONLY: (_METRIC_RTT, None),
    CONGESTION_THEN_LENGTH: (_METRIC_CONGESTION, _METRIC_LENGTH),
    RTT_THEN_LENGTH: (_METRIC_RTT, _METRIC_LENGTH),
    LENGTH_THEN_CONGESTION: (_METRIC_LENGTH, _METRIC_CONGESTION),
    LENGTH_THEN_RTT: (_METRIC_LENGTH, _METRIC_RTT),
    RTT_THEN_CONGESTION: (_METRIC_RTT, _METRIC_CONGESTION),
    CONGESTION_THEN_RTT: (_METRIC_CONGESTION, _METRIC_RTT),
}


class UnknownStrategyError(ValueError):
    pass


@dataclass(frozen=True)
class CircuitScore:
    """Selection-time view of one candidate circuit.

    Length is always computable from geometry; RTT and congestion are None
    only while the circuit's measurement window is empty.
    """

    circuit_id: int
    mean_rtt: Optional[float]
    mean_congestion: Optional[float]
    length_km: float


def _metric_key(metric: str):
    if metric == _METRIC_LENGTH:
        return lambda s: (0, s.length_km, s.circuit_id)
    if metric == _METRIC_RTT:
        return lambda s: (1, 0.0, s.circuit_id) if s.mean_rtt is None else (0, s.mean_rtt, s.circuit_id)
    if metric == _METRIC_CONGESTION:
        return (
            lambda s: (1, 0.0, s.circuit_id)
            if s.mean_congestion is None
            else (0, s.mean_congestion, s.circuit_id)
        )
    raise ValueError(metric)


def select(
    strategy: str,
    candidates: Sequence[CircuitScore],
    rng: Optional[RngStream] = None,
    car_sample_size: int = CAR_SAMPLE_SIZE,
) -> int:
    """Return the circuit_id the given strategy attaches the next stream to."""
    if not candidates:
        raise ValueError("select() needs a non-empty candidate list")
    if strategy not in STRATEGY_IDS:
        raise UnknownStrategyError(strategy)

    ordered = sorted(candidates, key=lambda s: s.circuit_id)

    if strategy == VANILLA:
        # Oldest clean circuit, i.e. the lowest id.
        return ordered[0].circuit_id

    if strategy == CAR:
        if rng is None:
            raise ValueError("car selection needs an RNG stream")
        k = min(car_sample_size, len(ordered))
        sampled = rng.sample(ordered, k)
        return min(sampled, key=_metric_key(_METRIC_CONGESTION)).circuit_id

    primary, secondary = _COMPOSITES[strategy]
    if secondary is None:
        return min(ordered, key=_metric_key(primary)).circuit_id
    # Two lowest on the primary metric, then the better secondary among them.
    shortlist = sorted(ordered, key=_metric_key(primary))[:2]
    return min(shortlist, key=_metric_key(secondary)).circuit_id


def car_abandon_check(
    score: CircuitScore, threshold_ms: float = CAR_ABANDON_THRESHOLD_MS
) -> bool:
    """True when mean congestion is measured and strictly above the threshold.

    An abandoned circuit stops receiving new streams but keeps serving the
    ones already attached.
    """
    return score.mean_congestion is not None and score.mean_congestion > threshold_ms
