"""Pool protocol: replenishment to N, dirty marking, reaping, candidates."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuitsim.circuits import Circuit, STATE_DIRTY, STATE_OPEN
from circuitsim.engine import s_to_ticks
from circuitsim.network import RelayDescriptor
from circuitsim.pool import CircuitPool, PoolConfig, VANILLA_TARGET


def _relay(rid, guard=False, exit_=False, ports=(80, 443)):
    return RelayDescriptor(
        relay_id=rid,
        bandwidth=100.0,
        is_guard=guard,
        is_exit=exit_,
        position=(0.0, 0.0),
        exit_policy=frozenset(ports) if exit_ else frozenset(),
    )


class CircuitFactory:
    """Registers circuits like the simulation's build path does."""

    def __init__(self, pool, exit_ports=(80, 443)):
        self.pool = pool
        self.next_id = 0
        self.exit_ports = exit_ports
        self.fail = False

    def __call__(self, port):
        if self.fail:
            return None
        path = (_relay(100, guard=True), _relay(101), _relay(102, exit_=True, ports=self.exit_ports))
        c = Circuit(self.next_id, self.pool.client_key, path, (0.0, 0.0), requested_at=0)
        self.next_id += 1
        self.pool.add(c)
        return c

    def open_all(self, now=0):
        for c in self.pool.circuits.values():
            if c.state == "building":
                c.transition(STATE_OPEN, now)


def _pool(target_n=3, reap=True, seed_ports=(80,)):
    pool = CircuitPool("C0", PoolConfig(target_n=target_n, reap_enabled=reap), seed_ports)
    return pool, CircuitFactory(pool)


def test_replenish_tops_up_to_target():
    pool, factory = _pool(target_n=3)
    factory(80)
    factory.open_all()
    started = pool.replenish(0, factory)
    assert len(started) == 2
    assert pool.clean_count(80) == 3


def test_replenish_noop_at_target():
    pool, factory = _pool(target_n=3)
    for _ in range(3):
        factory(80)
    factory.open_all()
    assert pool.replenish(0, factory) == []


def test_vanilla_baseline_keeps_two_circuits():
    pool, factory = _pool(target_n=None)
    assert pool.config.target == VANILLA_TARGET
    started = pool.replenish(0, factory)
    assert len(started) == 2


def test_building_circuits_count_toward_target():
    pool, factory = _pool(target_n=4)
    factory(80)  # stays in building state
    started = pool.replenish(0, factory)
    assert len(started) == 3


def test_one_circuit_can_cover_several_port_classes():
    pool, factory = _pool(target_n=2, seed_ports=(80, 443))
    started = pool.replenish(0, factory)
    # exits allow both ports, so two circuits satisfy both classes
    assert len(started) == 2
    assert pool.clean_count(80) == 2 and pool.clean_count(443) == 2


def test_failed_path_construction_retries_next_tick():
    pool, factory = _pool(target_n=2)
    factory.fail = True
    assert pool.replenish(0, factory) == []
    assert pool.builds_failed == 1
    factory.fail = False
    assert len(pool.replenish(s_to_ticks(1), factory)) == 2


def test_mark_dirty_at_exactly_ten_minutes():
    pool, factory = _pool()
    c = factory(80)
    factory.open_all()
    c.mark_used(0)
    c.stream_finished()
    pool.mark_dirty(s_to_ticks(600))
    assert c.state == STATE_DIRTY


def test_not_dirty_just_before_boundary():
    pool, factory = _pool()
    c = factory(80)
    factory.open_all()
    c.mark_used(0)
    pool.mark_dirty(s_to_ticks(599.999))
    assert c.state == STATE_OPEN


def test_never_used_circuit_not_marked_dirty():
    pool, factory = _pool(reap=False)
    c = factory(80)
    factory.open_all()
    pool.mark_dirty(s_to_ticks(601))
    assert c.state == STATE_OPEN  # reaping governs unused circuits instead


def test_dirty_serves_attached_streams_until_drained():
    pool, factory = _pool()
    c = factory(80)
    factory.open_all()
    c.mark_used(0)  # stream still attached
    pool.mark_dirty(s_to_ticks(600))
    assert c.state == STATE_DIRTY
    assert pool.close_drained_dirty(s_to_ticks(600)) == []
    c.stream_finished()
    assert pool.close_drained_dirty(s_to_ticks(601)) == [c]


def test_reap_unused_at_exactly_five_minutes():
    pool, factory = _pool()
    c = factory(80)
    factory.open_all(now=0)
    pool.reap_unused(s_to_ticks(300))
    assert c.state == "closed"
    assert c.close_reason == "reaped"


def test_reap_skips_used_and_early_circuits():
    pool, factory = _pool()
    used = factory(80)
    young = factory(80)
    factory.open_all(now=0)
    used.mark_used(s_to_ticks(100))
    used.stream_finished()
    pool.reap_unused(s_to_ticks(299))
    assert young.state == STATE_OPEN
    pool.reap_unused(s_to_ticks(400))
    assert used.state == STATE_OPEN  # carried a stream once: exempt
    assert young.state == "closed"


def test_reap_disabled_for_baseline_modes():
    pool, factory = _pool(reap=False)
    c = factory(80)
    factory.open_all()
    pool.reap_unused(s_to_ticks(3000))
    assert c.state == STATE_OPEN


def test_candidates_filters_states_and_ports():
    pool, factory = _pool(target_n=10)
    circuits = [factory(80) for _ in range(7)]
    factory.open_all()
    circuits[5].mark_used(0)
    pool.mark_dirty(s_to_ticks(600))  # circuits[5] goes dirty
    back_to_building = circuits[6]
    back_to_building.state = "building"  # emulate an in-flight build
    cands = pool.candidates(80)
    assert circuits[5] not in cands
    assert back_to_building not in cands
    assert len(cands) == 5
    assert [c.circuit_id for c in cands] == sorted(c.circuit_id for c in cands)


def test_candidates_empty_for_unsupported_port():
    pool, factory = _pool()
    factory(80)
    factory.open_all()
    assert pool.candidates(22) == []


def test_abandoned_circuits_left_out():
    pool, factory = _pool()
    a, b = factory(80), factory(80)
    factory.open_all()
    a.abandoned = True
    assert pool.candidates(80) == [b]
    assert pool.clean_count(80) == 1


def test_port_memory_expires_stale_ports():
    pool, factory = _pool(seed_ports=(80,))
    pool.note_port(443, now=0)
    pool.expire_ports(s_to_ticks(3601))
    assert 443 not in pool.ports
    pool.note_port(22, s_to_ticks(3600))
    pool.expire_ports(s_to_ticks(3601))
    assert 22 in pool.ports


def test_prune_closed_removes_only_closed():
    pool, factory = _pool()
    keep = factory(80)
    gone = factory(80)
    factory.open_all(now=0)
    pool.reap_unused(s_to_ticks(300))  # closes both (unused)
    assert pool.prune_closed() == [keep, gone]
    assert pool.circuits == {}


def test_pool_config_validation():
    with pytest.raises(ValueError):
        PoolConfig(target_n=0)
    with pytest.raises(ValueError):
        PoolConfig(dirty_after_s=0)


# --- randomized schedule property suite -------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    target=st.integers(min_value=1, max_value=6),
    steps=st.lists(
        st.tuples(
            st.sampled_from(["advance", "attach", "finish", "build_done"]),
            st.integers(min_value=0, max_value=7),
        ),
        max_size=60,
    ),
)
def test_pool_invariants_under_random_schedules(target, steps):
    pool = CircuitPool("C0", PoolConfig(target_n=target), (80,))
    factory = CircuitFactory(pool)
    now = 0
    attached = []
    for op, arg in steps:
        if op == "advance":
            now += s_to_ticks(1 + arg * 37)
            pool.expire_ports(now)
            pool.mark_dirty(now)
            pool.close_drained_dirty(now)
            pool.reap_unused(now)
            pool.replenish(now, factory)
        elif op == "attach":
            cands = pool.candidates(80)
            if cands:
                c = cands[arg % len(cands)]
                c.mark_used(now)
                attached.append(c)
        elif op == "finish":
            if attached:
                attached.pop(arg % len(attached)).stream_finished()
        elif op == "build_done":
            building = [c for c in pool.circuits.values() if c.state == "building"]
            if building:
                building[arg % len(building)].transition(STATE_OPEN, now)

        # replenishment restores the floor within the same tick
        pool.replenish(now, factory)
        assert pool.clean_count(80) >= target
        # no dirty, closed, or building circuit is ever a candidate
        for c in pool.candidates(80):
            assert c.state == STATE_OPEN and not c.abandoned
        # reaping never closed a circuit that carried a stream
        for c in pool.circuits.values():
            if c.close_reason == "reaped":
                assert c.stream_count == 0
