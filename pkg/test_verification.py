#!/usr/bin/env python3
"""
Tests for the acceptance checks: the directional properties at quick scale and
the safety observer's protocol assertions
"""

import sys
from dataclasses import replace

import pytest

from event_engine import Event, EventKind, Simulation
from fleet_model import BROADCAST, DroneId, Role
from leader_protocol import MessageEnvelope, MessageKind
from scenario import instantiate
from verification import (
    ORACLE_CONFIG,
    SafetyObserver,
    SuiteSettings,
    check_death_time_stability,
    check_election_count,
    check_fleet_size,
    check_lifetime_advantage,
    check_safety,
)

A, B = DroneId(0, 0), DroneId(0, 1)
QUICK = SuiteSettings.for_mode(True)


def _tick(time=0):
    return Event(time, 10_000, EventKind.TICK)


def _deliver(env, seq):
    return Event(env.send_time + 1, seq, EventKind.DELIVER, env)


@pytest.mark.parametrize("check", [
    check_lifetime_advantage,
    check_fleet_size,
    check_election_count,
    check_death_time_stability,
])
def test_directional_check_passes_at_quick_scale(check):
    result = check(QUICK)
    assert result.passed, result.detail


def test_fleet_size_check_is_strict():
    assert "monotone_slack" not in SuiteSettings.model_fields


def test_safety_check_passes():
    result = check_safety(4)
    assert result.passed, result.detail


def test_observer_accepts_a_real_run():
    observer = SafetyObserver()
    Simulation(instantiate(ORACLE_CONFIG.replace(drones_per_cluster=3, max_ticks=40))).run(observer=observer)
    assert observer.violations == []


def test_observer_flags_a_member_following_the_wrong_leader():
    sim = Simulation(instantiate(ORACLE_CONFIG.replace(drones_per_cluster=3)))
    sim.in_flight.clear()
    leader = next(d for d in sim.order if sim.states[d].role is Role.LEADER)
    follower = next(d for d in sim.order if d != leader)
    other = next(d for d in sim.order if d not in (leader, follower))
    sim.states[follower] = replace(sim.states[follower], role=Role.MEMBER, known_leader=other)
    sim.states[other] = replace(sim.states[other], role=Role.MEMBER, known_leader=leader)

    observer = SafetyObserver()
    observer(sim, _tick())
    assert len(observer.violations) == 1
    assert f"{follower} follows {other}" in observer.violations[0]


def test_observer_flags_an_election_that_never_closes():
    sim = Simulation(instantiate(ORACLE_CONFIG))
    observer = SafetyObserver()
    observer(sim, _deliver(MessageEnvelope(MessageKind.WAKEUP_ELECTION, A, BROADCAST, 16, 3), 100))
    # a 2-drone cluster may spend at most 5 envelopes on one election
    for seq in range(101, 105):
        report = MessageEnvelope(MessageKind.BATTERY_REPORT, B, A, 24, 3, subject=B, level_units=10)
        observer(sim, _deliver(report, seq))
    assert observer.violations == []

    observer(sim, _deliver(MessageEnvelope(MessageKind.BATTERY_REPORT, B, A, 24, 3, subject=B, level_units=10), 105))
    assert any("still open after 5 envelopes" in v for v in observer.violations)


def test_observer_closes_the_election_on_its_result():
    sim = Simulation(instantiate(ORACLE_CONFIG))
    observer = SafetyObserver()
    for seq in range(3):
        observer(sim, _deliver(MessageEnvelope(MessageKind.WAKEUP_ELECTION, A, BROADCAST, 16, 3), 100 + 2 * seq))
        result = MessageEnvelope(MessageKind.ELECTION_MESSAGE, A, BROADCAST, 16, 3, subject=A, roster=(A, B))
        observer(sim, _deliver(result, 101 + 2 * seq))
    assert observer.election_traffic == {}
    assert not any("still open" in v for v in observer.violations)


def test_observer_flags_a_departed_sender():
    sim = Simulation(instantiate(ORACLE_CONFIG))
    sim.states[B] = replace(sim.states[B], role=Role.DEPARTED)
    observer = SafetyObserver()
    observer(sim, _tick())
    assert B in observer.departed
    assert observer.violations == []

    sim.queue.schedule(1, EventKind.DELIVER, MessageEnvelope(MessageKind.DATA, B, A, 64, 0))
    observer(sim, _tick())
    assert any(f"departed {B} sent data" in v for v in observer.violations)


def test_observer_allows_the_leave_sent_while_departing():
    sim = Simulation(instantiate(ORACLE_CONFIG))
    observer = SafetyObserver()
    observer(sim, _tick())
    sim.states[B] = replace(sim.states[B], role=Role.DEPARTED)
    sim.queue.schedule(1, EventKind.DELIVER, MessageEnvelope(MessageKind.LEAVE_MESSAGE, B, A, 16, 0, subject=B))
    observer(sim, _tick())
    assert not any("sent" in v for v in observer.violations)


def main():
    print("🧪 Verification checks - Test Suite")
    print("=" * 50)
    sys.exit(pytest.main([__file__, "-v"]))


if __name__ == "__main__":
    main()
