"""Event ordering, clock semantics, and RNG stream separation."""

import pytest

from circuitsim.engine import (
    Engine,
    PastEventError,
    RngStream,
    ms_to_ticks,
    s_to_ticks,
    ticks_to_ms,
)


def test_event_dispatch_order_by_time():
    eng = Engine(seed=1)
    log = []
    eng.schedule_at(3, "a", lambda: log.append("t3"))
    eng.schedule_at(5, "b", lambda: log.append("t5"))
    eng.schedule_at(4, "c", lambda: log.append("t4"))
    eng.run_until(10)
    assert log == ["t3", "t4", "t5"]
    assert eng.now == 10


def test_future_event_dispatches_at_its_time():
    eng = Engine(seed=1)
    eng.run_until(3)
    seen = []
    eng.schedule_at(5, "x", lambda: seen.append(eng.now))
    eng.run_until(10)
    assert seen == [5]


def test_tie_break_by_sequence_number():
    eng = Engine(seed=1)
    log = []
    eng.schedule_at(5, "first", lambda: log.append("first"))
    eng.schedule_at(5, "second", lambda: log.append("second"))
    eng.run_until(5)
    assert log == ["first", "second"]


def test_scheduling_in_the_past_rejected():
    eng = Engine(seed=1)
    eng.run_until(3)
    with pytest.raises(PastEventError):
        eng.schedule_at(2, "late", lambda: None)


def test_run_until_empty_queue_advances_clock():
    eng = Engine(seed=1)
    summary = eng.run_until(10)
    assert eng.now == 10
    assert summary.events_dispatched == 0


def test_run_until_dispatches_only_due_events():
    eng = Engine(seed=1)
    log = []
    for t in (1, 2, 3):
        eng.schedule_at(t, "e", lambda t=t: log.append(t))
    summary = eng.run_until(2)
    assert log == [1, 2]
    assert summary.events_dispatched == 2
    # nothing with fire_time <= end_time is left queued
    assert eng.pending() == 1


def test_events_dispatch_exactly_once():
    eng = Engine(seed=1)
    count = []
    eng.schedule_at(1, "e", lambda: count.append(1))
    eng.run_until(5)
    eng.run_until(9)
    assert len(count) == 1


def test_event_can_schedule_followup():
    eng = Engine(seed=1)
    log = []

    def first():
        log.append(("first", eng.now))
        eng.schedule_in(2, "next", lambda: log.append(("next", eng.now)))

    eng.schedule_at(1, "first", first)
    eng.run_until(10)
    assert log == [("first", 1), ("next", 3)]


def _traced_run(seed):
    eng = Engine(seed=seed)
    eng.trace = []
    rng = eng.rng("jobs")

    def spawn(depth):
        if depth < 4:
            eng.schedule_in(1 + rng.randrange(100), f"spawn{depth}", lambda: spawn(depth + 1))
            eng.schedule_in(1 + rng.randrange(100), f"leaf{depth}", lambda: None)

    eng.schedule_at(0, "root", lambda: spawn(0))
    eng.run_until(1000)
    return eng.trace


def test_golden_trace_identical_for_same_seed():
    assert _traced_run(7) == _traced_run(7)
    assert _traced_run(7) != _traced_run(8)


def test_rng_stream_reproducible_and_separated():
    a1 = RngStream(42, "network.jitter")
    a2 = RngStream(42, "network.jitter")
    b = RngStream(42, "traffic")
    seq1 = [a1.random() for _ in range(20)]
    seq2 = [a2.random() for _ in range(20)]
    seq3 = [b.random() for _ in range(20)]
    assert seq1 == seq2
    assert seq1 != seq3


def test_engine_rng_cached_per_label():
    eng = Engine(seed=9)
    assert eng.rng("x") is eng.rng("x")
    assert eng.rng("x") is not eng.rng("y")


def test_tick_conversions_round_trip():
    assert ms_to_ticks(2.0) == 2000
    assert s_to_ticks(1.5) == 1_500_000
    assert ticks_to_ms(2500) == 2.5
