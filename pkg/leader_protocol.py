"""
Per-drone leader-based energy management protocol.

Every handler is a pure transition: it takes a DroneState plus an input and
returns the next DroneState together with the envelopes the drone emits. The
engine owns all states, charges energy for the envelopes and applies the
transitions in event order.

Phases, in the order a cluster lives through them:
    initialization  - Init from the GBS; the lowest-ID drone leads and announces itself
    update          - members send Data to the leader, the leader buffers and flushes to the GBS
    election init   - the leader crosses its threshold, flushes and wakes the cluster up
    election        - members report battery levels, the leader names the gBest drone
    termination     - critically low drones leave; a departing leader hands over first
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from energy_model import is_depleted
from fleet_model import (
    BROADCAST,
    GBS,
    Address,
    Battery,
    DroneId,
    FleetSimError,
    Position,
    Role,
    ThresholdPercent,
    TopologyError,
    leader_position,
    threshold_level,
)

logger = logging.getLogger(__name__)

# ticks a handed-over leader keeps relaying late traffic before it leaves
LINGER_TICKS = 2


class ProtocolError(FleetSimError):
    pass


class MessageKind(str, Enum):
    INIT = "init"
    DATA = "data"
    BASE_MESSAGE = "base"
    WAKEUP_ELECTION = "wakeup"
    BATTERY_REPORT = "report"
    ELECTION_MESSAGE = "election"
    LEAVE_MESSAGE = "leave"


class Phase(str, Enum):
    WAITING = "waiting"
    UPDATE = "update"


@dataclass(frozen=True)
class Sample:
    origin: DroneId
    time: int


@dataclass(frozen=True)
class PayloadSizes:
    init: int = 16
    data: int = 64
    base_header: int = 32
    base_per_sample: int = 64
    wakeup: int = 16
    report: int = 24
    election: int = 16
    leave: int = 16

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"Payload size '{name}' must be positive, got {value}")

    def size_of(self, kind: MessageKind, samples: int = 0) -> int:
        if kind is MessageKind.BASE_MESSAGE:
            return self.base_header + self.base_per_sample * samples
        return {
            MessageKind.INIT: self.init,
            MessageKind.DATA: self.data,
            MessageKind.WAKEUP_ELECTION: self.wakeup,
            MessageKind.BATTERY_REPORT: self.report,
            MessageKind.ELECTION_MESSAGE: self.election,
            MessageKind.LEAVE_MESSAGE: self.leave,
        }[kind]


@dataclass(frozen=True)
class MessageEnvelope:
    """
    A protocol message in flight.

    `subject` is the drone a message is about: the reporter of a BatteryReport,
    the new leader named by an ElectionMessage, the leaver of a LeaveMessage.
    """

    kind: MessageKind
    src: Address
    dst: Address
    payload_bytes: int
    send_time: int
    samples: Tuple[Sample, ...] = ()
    subject: Optional[DroneId] = None
    level_units: Optional[int] = None
    roster: Tuple[DroneId, ...] = ()

    def __post_init__(self):
        if self.payload_bytes <= 0:
            raise ValueError(f"Envelope payload must be positive, got {self.payload_bytes}")

    @property
    def is_broadcast(self) -> bool:
        return self.dst == BROADCAST


@dataclass(frozen=True)
class BatteryReport:
    id: DroneId
    cluster: int
    level_units: int


@dataclass(frozen=True)
class DroneState:
    id: DroneId
    role: Role
    position: Position
    home: Position
    battery: Battery
    buffer_capacity: int
    threshold: ThresholdPercent
    known_leader: Optional[DroneId] = None
    buffer: Tuple[Sample, ...] = ()
    election_pending: bool = False
    pending_reports: Tuple[BatteryReport, ...] = ()
    roster: FrozenSet[DroneId] = frozenset()
    phase: Phase = Phase.WAITING
    initialized: bool = False
    departing: bool = False
    awaiting_result: bool = False
    linger_until: Optional[int] = None
    direct_to_gbs: bool = False

    @property
    def cluster(self) -> int:
        return self.id.cluster_index

    @property
    def cluster_size_known(self) -> int:
        return len(self.roster)

    @property
    def is_live(self) -> bool:
        return self.role is not Role.DEPARTED


class StepContext:
    """What a handler may know about the world beyond its own state."""

    def __init__(self, now: int, sizes: PayloadSizes, gbs: Position, critical_fraction: float,
                 centroid_fn: Callable[[], Position]):
        self.now = now
        self.sizes = sizes
        self.gbs = gbs
        self.critical_fraction = critical_fraction
        self._centroid_fn = centroid_fn

    @cached_property
    def centroid(self) -> Position:
        return self._centroid_fn()


Transition = Tuple[DroneState, List[MessageEnvelope]]


def _envelope(ctx: StepContext, kind: MessageKind, src: Address, dst: Address, **body) -> MessageEnvelope:
    samples = body.get("samples", ())
    return MessageEnvelope(kind, src, dst, ctx.sizes.size_of(kind, len(samples)), ctx.now, **body)


def _flush(state: DroneState, ctx: StepContext) -> Transition:
    if not state.buffer:
        return state, []
    env = _envelope(ctx, MessageKind.BASE_MESSAGE, state.id, GBS, samples=state.buffer)
    return replace(state, buffer=()), [env]


def _buffer_sample(state: DroneState, sample: Sample, ctx: StepContext) -> Transition:
    state = replace(state, buffer=state.buffer + (sample,))
    if len(state.buffer) >= state.buffer_capacity:
        return _flush(state, ctx)
    return state, []


def _forward(state: DroneState, msg: MessageEnvelope, ctx: StepContext) -> Transition:
    if state.known_leader is None:
        raise ProtocolError(f"{state.id} got {msg.kind.value} but knows no leader to forward it to")
    fwd = MessageEnvelope(msg.kind, state.id, state.known_leader, msg.payload_bytes, ctx.now,
                          samples=msg.samples, subject=msg.subject)
    logger.debug("%s forwards stale %s to %s", state.id, msg.kind.value, state.known_leader)
    return state, [fwd]


def initial_leaders(topology: Dict[int, Sequence[DroneId]]) -> Dict[int, DroneId]:
    leaders = {}
    for cluster, drones in topology.items():
        if not drones:
            raise TopologyError(f"Cluster {cluster} has no drones")
        leaders[cluster] = min(drones)
    return leaders


def senses(state: DroneState) -> bool:
    """Whether the drone generates a data sample on this tick."""
    if not state.is_live or state.departing or state.linger_until is not None:
        return False
    if state.direct_to_gbs:
        return True
    return state.initialized and state.phase is Phase.UPDATE


def holds_gbs_link(state: DroneState) -> bool:
    """Whether the drone keeps the direct station link up (and pays its beacon) this tick."""
    if not state.is_live or state.departing or state.linger_until is not None:
        return False
    return state.direct_to_gbs or (state.initialized and state.role is Role.LEADER)


def _become_leader(state: DroneState, ctx: StepContext) -> DroneState:
    return replace(
        state,
        role=Role.LEADER,
        known_leader=state.id,
        battery=state.battery.snapshot_b0(),
        position=leader_position(ctx.centroid, ctx.gbs),
        buffer=(),
        phase=Phase.UPDATE,
        election_pending=False,
        pending_reports=(),
        awaiting_result=False,
    )


def on_init(state: DroneState, msg: MessageEnvelope, ctx: StepContext) -> Transition:
    if state.initialized:
        raise ProtocolError(f"{state.id} received Init twice")
    state = replace(state, initialized=True)
    if state.role is Role.LEADER:
        state = _become_leader(state, ctx)
        if state.cluster_size_known <= 1:
            return state, []
        announce = _envelope(ctx, MessageKind.ELECTION_MESSAGE, state.id, BROADCAST,
                             subject=state.id, roster=tuple(sorted(state.roster)))
        return state, [announce]
    if state.known_leader is not None:
        state = replace(state, phase=Phase.UPDATE)
    return state, []


def on_tick(state: DroneState, ctx: StepContext) -> Transition:
    if not state.is_live:
        return state, []
    if state.linger_until is not None:
        if ctx.now > state.linger_until:
            logger.debug("%s finished relaying and leaves at %d", state.id, ctx.now)
            return replace(state, role=Role.DEPARTED), []
        return state, []
    if not senses(state):
        return state, []
    sample = Sample(state.id, ctx.now)
    if state.direct_to_gbs:
        return state, [_envelope(ctx, MessageKind.DATA, state.id, GBS, samples=(sample,))]
    if state.role is Role.LEADER:
        return _buffer_sample(state, sample, ctx)
    return state, [_envelope(ctx, MessageKind.DATA, state.id, state.known_leader, samples=(sample,))]


def on_data(state: DroneState, msg: MessageEnvelope, ctx: StepContext) -> Transition:
    if state.role is Role.LEADER:
        return _buffer_sample(state, msg.samples[0], ctx)
    # stale leader knowledge at the sender: relay to whoever leads now
    return _forward(state, msg, ctx)


def should_trigger_election(state: DroneState) -> bool:
    if state.role is not Role.LEADER:
        raise ProtocolError(f"{state.id} is not a leader")
    return state.battery.level_units < threshold_level(state.battery.b0_units, state.threshold)


def start_election(state: DroneState, ctx: StepContext) -> Transition:
    if state.role is not Role.LEADER:
        raise ProtocolError(f"{state.id} cannot start an election as {state.role.value}")
    if state.election_pending:
        raise ProtocolError(f"{state.id} already has an election pending")
    state, out = _flush(state, ctx)
    if state.cluster_size_known <= 1:
        if state.departing:
            logger.debug("Last drone %s of cluster %d leaves", state.id, state.cluster)
            return replace(state, role=Role.DEPARTED), out
        # alone: keep leading with a fresh B0
        return replace(state, battery=state.battery.snapshot_b0()), out
    logger.debug("%s starts an election at level %d", state.id, state.battery.level_units)
    state = replace(state, election_pending=True, pending_reports=())
    return state, out + [_envelope(ctx, MessageKind.WAKEUP_ELECTION, state.id, BROADCAST)]


def on_wakeup(state: DroneState, msg: MessageEnvelope, ctx: StepContext) -> Transition:
    if not state.is_live or state.linger_until is not None:
        return state, []
    if state.role is Role.LEADER:
        raise ProtocolError(f"Leader {state.id} received a WakeupElection from {msg.src}")
    report = _envelope(ctx, MessageKind.BATTERY_REPORT, state.id, msg.src,
                       subject=state.id, level_units=state.battery.level_units)
    return replace(state, awaiting_result=True), [report]


def select_gbest(reports: Iterable[BatteryReport], self_level: Optional[int], self_id: DroneId) -> DroneId:
    """
    Drone with the most remaining battery; ties go to the lowest id.

    Passing self_level=None leaves the caller out of the candidate set (a
    departing leader).
    """
    candidates = [(r.level_units, r.id) for r in reports]
    if self_level is not None:
        candidates.append((self_level, self_id))
    if not candidates:
        raise ProtocolError(f"{self_id} has no election candidates")
    return min(candidates, key=lambda c: (-c[0], c[1]))[1]


def _complete_election_if_ready(state: DroneState, ctx: StepContext) -> Transition:
    expected = state.roster - {state.id}
    reports = [r for r in state.pending_reports if r.id in expected]
    if {r.id for r in reports} != expected:
        return state, []

    if not reports and state.departing:
        state, out = _flush(replace(state, election_pending=False, pending_reports=()), ctx)
        logger.debug("Last drone %s of cluster %d leaves", state.id, state.cluster)
        return replace(state, role=Role.DEPARTED), out

    self_level = None if state.departing else state.battery.level_units
    winner = select_gbest(reports, self_level, state.id)
    state = replace(state, election_pending=False, pending_reports=())
    if not reports:
        # everybody else left during the election
        return replace(state, battery=state.battery.snapshot_b0()), []

    new_roster = state.roster - {state.id} if state.departing else state.roster
    out = [_envelope(ctx, MessageKind.ELECTION_MESSAGE, state.id, BROADCAST,
                     subject=winner, roster=tuple(sorted(new_roster)))]
    state, flushed = _flush(state, ctx)
    out += flushed
    if winner == state.id:
        logger.debug("%s re-elected with level %d", state.id, state.battery.level_units)
        return replace(state, battery=state.battery.snapshot_b0()), out

    logger.debug("%s hands leadership of cluster %d to %s", state.id, state.cluster, winner)
    state = replace(state, role=Role.MEMBER, known_leader=winner, position=state.home, roster=new_roster)
    if state.departing:
        state = replace(state, linger_until=ctx.now + LINGER_TICKS)
    return state, out


def on_battery_report(state: DroneState, msg: MessageEnvelope, ctx: StepContext) -> Transition:
    if state.role is not Role.LEADER or not state.election_pending:
        logger.debug("%s ignores a late report from %s", state.id, msg.subject)
        return state, []
    report = BatteryReport(msg.subject, msg.subject.cluster_index, msg.level_units)
    kept = tuple(r for r in state.pending_reports if r.id != report.id)
    state = replace(state, pending_reports=kept + (report,))
    return _complete_election_if_ready(state, ctx)


def on_election_result(state: DroneState, msg: MessageEnvelope, ctx: StepContext) -> Transition:
    new_leader = msg.subject
    if new_leader not in msg.roster:
        raise ProtocolError(f"ElectionMessage names {new_leader}, who is not a live member of the cluster")
    if not state.is_live:
        return state, []
    if state.linger_until is not None:
        return replace(state, known_leader=new_leader), []

    state = replace(state, roster=frozenset(msg.roster), awaiting_result=False)
    if new_leader == state.id:
        state = _become_leader(replace(state, initialized=True), ctx)
        if state.departing:
            return _leader_departs(state, ctx)
        return state, []

    state = replace(state, role=Role.MEMBER, known_leader=new_leader)
    if state.initialized:
        state = replace(state, phase=Phase.UPDATE)
    if state.departing:
        leave = _envelope(ctx, MessageKind.LEAVE_MESSAGE, state.id, new_leader, subject=state.id)
        return replace(state, role=Role.DEPARTED), [leave]
    return state, []


def _leader_departs(state: DroneState, ctx: StepContext) -> Transition:
    state = replace(state, departing=True)
    if state.election_pending:
        # the running election finishes without this drone as a candidate
        return _complete_election_if_ready(state, ctx)
    return start_election(state, ctx)


def on_depleted(state: DroneState, ctx: StepContext) -> Transition:
    if not state.is_live or state.departing:
        return state, []
    if state.direct_to_gbs:
        return replace(state, role=Role.DEPARTED), []
    if state.role is Role.LEADER:
        return _leader_departs(state, ctx)
    if state.known_leader is None or state.awaiting_result:
        # leave once the outcome of the running election (or the first announcement) is known
        return replace(state, departing=True), []
    leave = _envelope(ctx, MessageKind.LEAVE_MESSAGE, state.id, state.known_leader, subject=state.id)
    return replace(state, role=Role.DEPARTED), [leave]


def on_leave(state: DroneState, msg: MessageEnvelope, ctx: StepContext) -> Transition:
    if state.role is not Role.LEADER:
        state = replace(state, roster=state.roster - {msg.subject})
        return _forward(state, msg, ctx)
    if msg.subject not in state.roster:
        raise ProtocolError(f"Leader {state.id} got a LeaveMessage for unknown member {msg.subject}")
    state = replace(
        state,
        roster=state.roster - {msg.subject},
        pending_reports=tuple(r for r in state.pending_reports if r.id != msg.subject),
    )
    if state.election_pending:
        return _complete_election_if_ready(state, ctx)
    return state, []


def on_drain(state: DroneState, ctx: StepContext) -> Tuple[DroneState, List[MessageEnvelope], Optional[str]]:
    """
    Post-drain check run by the engine after every event that charged a drone.

    Returns the new state, emissions and a trace label ("depleted" or
    "threshold"), or None as label when nothing happened.
    """
    if not state.is_live or state.departing:
        return state, [], None
    if is_depleted(state.battery, ctx.critical_fraction):
        new_state, out = on_depleted(state, ctx)
        return new_state, out, "depleted"
    if (state.role is Role.LEADER and state.initialized and not state.election_pending
            and should_trigger_election(state)):
        new_state, out = start_election(state, ctx)
        return new_state, out, "threshold"
    return state, [], None


HANDLERS: Dict[MessageKind, Callable[[DroneState, MessageEnvelope, StepContext], Transition]] = {
    MessageKind.INIT: on_init,
    MessageKind.DATA: on_data,
    MessageKind.WAKEUP_ELECTION: on_wakeup,
    MessageKind.BATTERY_REPORT: on_battery_report,
    MessageKind.ELECTION_MESSAGE: on_election_result,
    MessageKind.LEAVE_MESSAGE: on_leave,
}


def handle(state: DroneState, msg: MessageEnvelope, ctx: StepContext) -> Transition:
    try:
        handler = HANDLERS[msg.kind]
    except KeyError:
        raise ProtocolError(f"{state.id} cannot handle {msg.kind.value} messages") from None
    return handler(state, msg, ctx)
