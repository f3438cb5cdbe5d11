#!/usr/bin/env python3
"""
Tests for the per-drone protocol transitions
"""

import sys
from dataclasses import replace

import pytest

from fleet_model import BROADCAST, GBS, GBS_POSITION, Battery, DroneId, Position, Role, TopologyError
from leader_protocol import (
    LINGER_TICKS,
    BatteryReport,
    DroneState,
    MessageEnvelope,
    MessageKind,
    PayloadSizes,
    Phase,
    ProtocolError,
    Sample,
    StepContext,
    handle,
    holds_gbs_link,
    initial_leaders,
    on_battery_report,
    on_data,
    on_depleted,
    on_drain,
    on_election_result,
    on_init,
    on_leave,
    on_tick,
    on_wakeup,
    select_gbest,
    senses,
    should_trigger_election,
    start_election,
)

SIZES = PayloadSizes()
HOME = Position(0, 0, 100)
MIDPOINT = Position(0, 0, 50)
A, B, C = DroneId(0, 0), DroneId(0, 1), DroneId(0, 2)
ROSTER = frozenset({A, B, C})


def ctx(now=5):
    return StepContext(now, SIZES, GBS_POSITION, 0.05, lambda: HOME)


def drone(drone_id, role=Role.MEMBER, level=1000, b0=None, **fields):
    fields.setdefault("known_leader", A)
    fields.setdefault("roster", ROSTER)
    fields.setdefault("phase", Phase.UPDATE)
    fields.setdefault("initialized", True)
    buffer_capacity = fields.pop("buffer_capacity", 3)
    threshold = fields.pop("threshold", 60.0)
    battery = Battery(1000, level, level if b0 is None else b0)
    return DroneState(drone_id, role, HOME, HOME, battery, buffer_capacity, threshold, **fields)


def envelope(kind, src, dst, **body):
    samples = body.get("samples", ())
    return MessageEnvelope(kind, src, dst, SIZES.size_of(kind, len(samples)), 4, **body)


def report(src, level, dst=A):
    return envelope(MessageKind.BATTERY_REPORT, src, dst, subject=src, level_units=level)


def electing_leader(level=400, **fields):
    leader, _ = start_election(drone(A, Role.LEADER, level, b0=1000, **fields), ctx())
    return leader


# --- initialization ---------------------------------------------------------


def test_initial_leaders_picks_lowest_id():
    topology = {0: [DroneId(0, 2), DroneId(0, 0), DroneId(0, 1)], 1: [DroneId(1, 1), DroneId(1, 0)]}
    assert initial_leaders(topology) == {0: DroneId(0, 0), 1: DroneId(1, 0)}
    assert initial_leaders({0: [DroneId(0, 0)]}) == {0: DroneId(0, 0)}


def test_initial_leaders_rejects_empty_cluster():
    with pytest.raises(TopologyError):
        initial_leaders({0: []})


def test_leader_announces_itself_on_init():
    leader = drone(A, Role.LEADER, 990, initialized=False, phase=Phase.WAITING)
    init = envelope(MessageKind.INIT, GBS, A)
    state, out = on_init(leader, init, ctx(0))

    assert state.initialized and state.role is Role.LEADER
    assert state.position == MIDPOINT
    assert state.battery.b0_units == 990
    assert [(e.kind, e.dst, e.subject, e.roster) for e in out] == [
        (MessageKind.ELECTION_MESSAGE, BROADCAST, A, (A, B, C))
    ]

    with pytest.raises(ProtocolError):
        on_init(state, init, ctx(1))


def test_member_waits_for_announcement_after_init():
    member = drone(B, known_leader=None, initialized=False, phase=Phase.WAITING)
    state, out = on_init(member, envelope(MessageKind.INIT, GBS, B), ctx(0))
    assert out == []
    assert state.phase is Phase.WAITING
    assert not senses(state)


def test_station_link_holders():
    assert holds_gbs_link(drone(A, Role.LEADER))
    assert not holds_gbs_link(drone(A, Role.LEADER, initialized=False))
    assert not holds_gbs_link(drone(A, Role.LEADER, departing=True))
    assert not holds_gbs_link(drone(B))
    assert holds_gbs_link(drone(B, known_leader=None, direct_to_gbs=True))
    assert not holds_gbs_link(drone(B, role=Role.MEMBER, linger_until=7))
    assert not holds_gbs_link(drone(B, role=Role.DEPARTED, direct_to_gbs=True))


def test_lone_drone_does_not_announce():
    alone = drone(A, Role.LEADER, initialized=False, roster=frozenset({A}))
    state, out = on_init(alone, envelope(MessageKind.INIT, GBS, A), ctx(0))
    assert out == [] and state.role is Role.LEADER


# --- update phase -------------------------------------------------------------


def test_member_sends_data_to_leader():
    state, out = on_tick(drone(B), ctx(5))
    assert state == drone(B)
    assert len(out) == 1
    assert (out[0].kind, out[0].src, out[0].dst, out[0].payload_bytes) == (MessageKind.DATA, B, A, 64)
    assert out[0].samples == (Sample(B, 5),)


def test_leader_flushes_when_buffer_fills():
    leader = drone(A, Role.LEADER, buffer=(Sample(B, 3),))
    state, out = on_tick(leader, ctx(4))
    assert out == [] and len(state.buffer) == 2

    state, out = on_tick(state, ctx(5))
    assert state.buffer == ()
    assert [(e.kind, e.dst, e.payload_bytes) for e in out] == [(MessageKind.BASE_MESSAGE, GBS, 32 + 3 * 64)]
    assert out[0].samples == (Sample(B, 3), Sample(A, 4), Sample(A, 5))


def test_leader_buffers_member_data():
    leader = drone(A, Role.LEADER)
    state, out = on_data(leader, envelope(MessageKind.DATA, B, A, samples=(Sample(B, 3),)), ctx())
    assert out == [] and state.buffer == (Sample(B, 3),)

    full = drone(A, Role.LEADER, buffer=(Sample(A, 2), Sample(C, 2)))
    state, out = on_data(full, envelope(MessageKind.DATA, B, A, samples=(Sample(B, 3),)), ctx())
    assert state.buffer == ()
    assert [(e.kind, e.dst, len(e.samples)) for e in out] == [(MessageKind.BASE_MESSAGE, GBS, 3)]


def test_stale_data_is_relayed_to_the_current_leader():
    demoted = drone(A, known_leader=B)
    state, out = on_data(demoted, envelope(MessageKind.DATA, C, A, samples=(Sample(C, 3),)), ctx())
    assert state == demoted
    assert [(e.kind, e.src, e.dst, e.samples) for e in out] == [(MessageKind.DATA, A, B, (Sample(C, 3),))]

    with pytest.raises(ProtocolError):
        on_data(drone(A, known_leader=None), envelope(MessageKind.DATA, C, A, samples=(Sample(C, 3),)), ctx())


def test_baseline_drone_sends_directly_to_gbs():
    state, out = on_tick(drone(B, known_leader=None, direct_to_gbs=True), ctx(2))
    assert [(e.kind, e.dst) for e in out] == [(MessageKind.DATA, GBS)]


def test_payload_sizes():
    assert SIZES.size_of(MessageKind.BASE_MESSAGE, 10) == 32 + 640
    assert PayloadSizes(data=100).size_of(MessageKind.DATA) == 100
    with pytest.raises(ValueError):
        PayloadSizes(leave=0)


# --- election -----------------------------------------------------------------


@pytest.mark.parametrize("level, expected", [(39, True), (40, False), (1000, False)])
def test_should_trigger_election(level, expected):
    assert should_trigger_election(drone(A, Role.LEADER, level, b0=100, threshold=60.0)) is expected


def test_should_trigger_election_only_for_leaders():
    with pytest.raises(ProtocolError):
        should_trigger_election(drone(B))


def test_start_election_flushes_then_wakes_the_cluster():
    leader = drone(A, Role.LEADER, 300, b0=1000, buffer=(Sample(B, 4),))
    state, out = start_election(leader, ctx())
    assert state.election_pending and state.buffer == ()
    assert [(e.kind, e.dst) for e in out] == [
        (MessageKind.BASE_MESSAGE, GBS),
        (MessageKind.WAKEUP_ELECTION, BROADCAST),
    ]
    with pytest.raises(ProtocolError):
        start_election(state, ctx())


def test_lone_leader_resets_b0_instead_of_electing():
    state, out = start_election(drone(A, Role.LEADER, 300, b0=1000, roster=frozenset({A})), ctx())
    assert out == []
    assert not state.election_pending
    assert state.battery.b0_units == 300


def test_member_reports_battery_on_wakeup():
    wakeup = envelope(MessageKind.WAKEUP_ELECTION, A, BROADCAST)
    state, out = on_wakeup(drone(B, level=700), wakeup, ctx())
    assert state.awaiting_result
    assert [(e.kind, e.dst, e.subject, e.level_units, e.payload_bytes) for e in out] == [
        (MessageKind.BATTERY_REPORT, A, B, 700, 24)
    ]


def test_wakeup_at_a_leader_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        on_wakeup(drone(A, Role.LEADER), envelope(MessageKind.WAKEUP_ELECTION, B, BROADCAST), ctx())


def test_lingering_drone_ignores_wakeup():
    state, out = on_wakeup(drone(B, linger_until=7), envelope(MessageKind.WAKEUP_ELECTION, A, BROADCAST), ctx())
    assert out == [] and not state.awaiting_result


def test_select_gbest_examples():
    reports = [BatteryReport(B, 0, 80), BatteryReport(C, 0, 60)]
    assert select_gbest(reports, 50, A) == B
    assert select_gbest([BatteryReport(B, 0, 70), BatteryReport(C, 0, 70)], 50, A) == B
    assert select_gbest(reports, 80, A) == A
    assert select_gbest([BatteryReport(C, 0, 10)], None, A) == C
    with pytest.raises(ProtocolError):
        select_gbest([], None, A)


def test_election_hands_over_to_the_fullest_drone():
    leader = replace(electing_leader(400), position=MIDPOINT)
    state, out = on_battery_report(leader, report(B, 700), ctx())
    assert out == [] and state.election_pending

    state, out = on_battery_report(state, report(C, 700), ctx())
    assert [(e.kind, e.dst, e.subject, e.roster) for e in out] == [
        (MessageKind.ELECTION_MESSAGE, BROADCAST, B, (A, B, C))
    ]
    assert state.role is Role.MEMBER
    assert state.known_leader == B
    assert state.position == HOME
    assert not state.election_pending


def test_election_re_elects_the_leader_with_fresh_b0():
    state, _ = on_battery_report(electing_leader(900), report(B, 700), ctx())
    state, out = on_battery_report(state, report(C, 500), ctx())
    assert out[0].subject == A
    assert state.role is Role.LEADER
    assert state.battery.b0_units == 900


def test_duplicate_report_replaces_the_earlier_one():
    state, _ = on_battery_report(electing_leader(), report(B, 700), ctx())
    state, _ = on_battery_report(state, report(B, 650), ctx())
    assert [(r.id, r.level_units) for r in state.pending_reports] == [(B, 650)]


def test_late_report_is_ignored():
    leader = drone(A, Role.LEADER)
    state, out = on_battery_report(leader, report(B, 700), ctx())
    assert state == leader and out == []


def test_named_member_becomes_leader():
    member = drone(B, awaiting_result=True)
    result = envelope(MessageKind.ELECTION_MESSAGE, A, BROADCAST, subject=B, roster=(A, B, C))
    state, out = on_election_result(member, result, ctx())
    assert out == []
    assert state.role is Role.LEADER and state.known_leader == B
    assert state.position == MIDPOINT
    assert not state.awaiting_result


def test_other_members_follow_the_new_leader():
    result = envelope(MessageKind.ELECTION_MESSAGE, A, BROADCAST, subject=B, roster=(A, B, C))
    state, out = on_election_result(drone(C, awaiting_result=True), result, ctx())
    assert out == [] and state.known_leader == B and state.role is Role.MEMBER


def test_election_message_for_unknown_drone_is_rejected():
    result = envelope(MessageKind.ELECTION_MESSAGE, A, BROADCAST, subject=DroneId(0, 9), roster=(A, B, C))
    with pytest.raises(ProtocolError):
        on_election_result(drone(B), result, ctx())


# --- termination ----------------------------------------------------------------


def test_depleted_member_leaves():
    state, out = on_depleted(drone(B, level=40), ctx())
    assert state.role is Role.DEPARTED
    assert [(e.kind, e.dst, e.subject) for e in out] == [(MessageKind.LEAVE_MESSAGE, A, B)]


def test_member_depleted_mid_election_defers_until_the_result():
    state, out = on_depleted(drone(B, level=40, awaiting_result=True), ctx())
    assert out == [] and state.is_live and state.departing
    assert not senses(state)

    result = envelope(MessageKind.ELECTION_MESSAGE, A, BROADCAST, subject=C, roster=(A, B, C))
    state, out = on_election_result(state, result, ctx(6))
    assert state.role is Role.DEPARTED
    assert [(e.kind, e.dst) for e in out] == [(MessageKind.LEAVE_MESSAGE, C)]


def test_deferred_member_named_leader_hands_over_at_once():
    deferred, _ = on_depleted(drone(B, level=40, awaiting_result=True), ctx())
    result = envelope(MessageKind.ELECTION_MESSAGE, A, BROADCAST, subject=B, roster=(A, B, C))
    state, out = on_election_result(deferred, result, ctx(6))
    assert state.role is Role.LEADER and state.departing and state.election_pending
    assert [(e.kind, e.dst) for e in out] == [(MessageKind.WAKEUP_ELECTION, BROADCAST)]


def test_departing_leader_hands_over_and_lingers():
    leader, out = on_depleted(drone(A, Role.LEADER, 900, b0=1000), ctx(5))
    assert leader.departing and leader.election_pending
    assert [e.kind for e in out] == [MessageKind.WAKEUP_ELECTION]

    # a departing leader is never a candidate, whatever its level
    state, _ = on_battery_report(leader, report(B, 100), ctx(6))
    state, out = on_battery_report(state, report(C, 200), ctx(7))
    assert [(e.subject, e.roster) for e in out] == [(C, (B, C))]
    assert state.role is Role.MEMBER and state.known_leader == C
    assert state.linger_until == 7 + LINGER_TICKS

    state, out = on_tick(state, ctx(7 + LINGER_TICKS))
    assert state.is_live and out == []
    state, _ = on_tick(state, ctx(8 + LINGER_TICKS))
    assert state.role is Role.DEPARTED


def test_last_drone_of_a_cluster_flushes_and_leaves():
    leader = drone(A, Role.LEADER, 40, b0=1000, roster=frozenset({A}), buffer=(Sample(A, 3),))
    state, out = on_depleted(leader, ctx())
    assert state.role is Role.DEPARTED
    assert [(e.kind, e.dst) for e in out] == [(MessageKind.BASE_MESSAGE, GBS)]


def test_baseline_drone_just_departs():
    state, out = on_depleted(drone(B, level=40, known_leader=None, direct_to_gbs=True), ctx())
    assert state.role is Role.DEPARTED and out == []


def test_leave_during_election_completes_it():
    state, _ = on_battery_report(electing_leader(), report(B, 700), ctx())
    leave = envelope(MessageKind.LEAVE_MESSAGE, C, A, subject=C)
    state, out = on_leave(state, leave, ctx())
    assert C not in state.roster
    assert [(e.subject, e.roster) for e in out] == [(B, (A, B))]


def test_leave_from_unknown_member_is_rejected():
    leader = drone(A, Role.LEADER, roster=frozenset({A, B}))
    with pytest.raises(ProtocolError):
        on_leave(leader, envelope(MessageKind.LEAVE_MESSAGE, C, A, subject=C), ctx())


def test_stale_leave_is_forwarded_to_the_leader():
    relay = drone(B, known_leader=C)
    state, out = on_leave(relay, envelope(MessageKind.LEAVE_MESSAGE, A, B, subject=A), ctx())
    assert A not in state.roster
    assert [(e.kind, e.src, e.dst, e.subject) for e in out] == [(MessageKind.LEAVE_MESSAGE, B, C, A)]


def test_on_drain_labels():
    state, out, label = on_drain(drone(A, Role.LEADER, 300, b0=1000), ctx())
    assert label == "threshold" and state.election_pending

    state, out, label = on_drain(drone(B, level=50), ctx())
    assert label == "depleted" and state.role is Role.DEPARTED

    state, out, label = on_drain(drone(B, level=500), ctx())
    assert label is None and out == []


def test_handle_rejects_messages_drones_never_receive():
    with pytest.raises(ProtocolError):
        handle(drone(B), envelope(MessageKind.BASE_MESSAGE, A, B), ctx())


def main():
    print("🧪 Leader protocol - Test Suite")
    print("=" * 50)
    sys.exit(pytest.main([__file__, "-v"]))


if __name__ == "__main__":
    main()
