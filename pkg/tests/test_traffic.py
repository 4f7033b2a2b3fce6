"""Stream record math and aggregation."""

import pytest

from circuitsim.engine import RngStream, s_to_ticks
from circuitsim.traffic import (
    BULK_PROFILE,
    ClientProfile,
    OUTCOME_COMPLETED,
    StreamRecord,
    WEB_PROFILE,
    aggregate,
    cdf_points,
    percentile,
    ttfb,
    ttlb,
)


def _record(requested_s, first_s, last_s, kind="web", client=0, stream_id=0):
    return StreamRecord(
        stream_id=stream_id,
        client_id=client,
        kind=kind,
        server_id=0,
        port=80,
        requested_at=s_to_ticks(requested_s),
        circuit_attached_at=s_to_ticks(requested_s),
        first_byte_at=s_to_ticks(first_s),
        last_byte_at=s_to_ticks(last_s),
        circuit_id=1,
        guard_id=1,
        middle_id=2,
        exit_id=3,
        outcome=OUTCOME_COMPLETED,
    )


def test_ttfb_example():
    rec = _record(10.0, 12.5, 20.0)
    assert ttfb(rec) == pytest.approx(2.5)
    assert ttlb(rec) == pytest.approx(10.0)


def test_ttfb_never_exceeds_ttlb():
    rec = _record(0.0, 1.25, 7.5)
    assert ttfb(rec) <= ttlb(rec)


def test_failed_records_have_no_latency():
    rec = StreamRecord(0, 0, "web", 0, 80, requested_at=0)
    with pytest.raises(ValueError):
        ttfb(rec)
    with pytest.raises(ValueError):
        ttlb(rec)


def test_record_ordering_validated():
    rec = _record(10.0, 9.0, 20.0)
    with pytest.raises(ValueError):
        rec.check_ordering()


def test_profiles_match_published_workloads():
    assert WEB_PROFILE.download_kib == 320
    assert WEB_PROFILE.think_range_s == (1.0, 20.0)
    assert BULK_PROFILE.download_kib == 5120
    assert BULK_PROFILE.think_range_s is None


def test_profile_validation():
    with pytest.raises(ValueError):
        ClientProfile("web", 0, (1.0, 2.0))
    with pytest.raises(ValueError):
        ClientProfile("web", 10, (3.0, 2.0))


def test_think_time_mean_matches_uniform():
    rng = RngStream(1, "traffic")
    lo, hi = WEB_PROFILE.think_range_s
    draws = [rng.uniform(lo, hi) for _ in range(10_000)]
    assert sum(draws) / len(draws) == pytest.approx(10.5, abs=0.2)


def test_percentile_and_median():
    values = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert percentile(values, 50) == 3.0
    assert percentile(values, 0) == 1.0
    assert percentile(values, 100) == 5.0
    assert percentile([7.0], 90) == 7.0


def test_aggregate_median_and_window():
    records = [_record(100.0 + i, 100.0 + i + v, 100.0 + i + v + 1, stream_id=i)
               for i, v in enumerate((1.0, 2.0, 3.0, 4.0, 5.0))]
    # one record before warm-up must be excluded
    records.append(_record(1.0, 2.0, 3.0, stream_id=99))
    summary = aggregate(records, circuits=[], warmup_ticks=s_to_ticks(50.0))
    web = summary["kinds"]["web"]
    assert web["streams"] == 5
    assert web["ttfb"]["median"] == pytest.approx(3.0)


def test_aggregate_counts_failures():
    records = [_record(100.0, 101.0, 102.0)]
    records.append(StreamRecord(1, 0, "web", 0, 80, requested_at=s_to_ticks(100.0)))
    summary = aggregate(records, circuits=[], warmup_ticks=0)
    assert summary["kinds"]["web"]["failed"] == 1
    assert summary["kinds"]["web"]["completed"] == 1


def test_cdf_points_monotone():
    pts = cdf_points([3.0, 1.0, 2.0, 2.0])
    assert pts == [(1.0, 0.25), (2.0, 0.5), (2.0, 0.75), (3.0, 1.0)]
