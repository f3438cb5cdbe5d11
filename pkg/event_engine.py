"""
Deterministic discrete-event core.

A heap of (time, seq) ordered events drives the simulation: one Tick event per
step fires every live drone, and Deliver events hand envelopes to their
destination one tick after they were sent. The engine charges all radio and
housekeeping energy, runs the protocol handlers and records the run trace.
"""

import hashlib
import heapq
import itertools
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import pandas as pd

from energy_model import DrainCause, Ledger, apply_drain, beacon_cost, idle_cost, rx_cost, sense_cost, tx_cost
from fleet_model import GBS, DroneId, FleetSimError, Position, Role, centroid, distance, to_units
from leader_protocol import (
    DroneState,
    MessageEnvelope,
    MessageKind,
    StepContext,
    Transition,
    handle,
    holds_gbs_link,
    on_drain,
    on_tick,
    senses,
)
from scenario import Scenario, ScenarioConfig, instantiate

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["time", "drone", "label", "emitted"]


class EngineError(FleetSimError):
    pass


class EventKind(str, Enum):
    TICK = "tick"
    DELIVER = "deliver"


@dataclass(frozen=True, order=True)
class Event:
    time: int
    seq: int
    kind: EventKind = field(compare=False)
    envelope: Optional[MessageEnvelope] = field(default=None, compare=False)


class EventQueue:
    """Events ordered by (time, seq); seq is handed out at scheduling time."""

    def __init__(self):
        self._heap: List[Event] = []
        self._seq = itertools.count()
        self.clock = 0

    def __len__(self):
        return len(self._heap)

    def schedule(self, time: int, kind: EventKind, envelope: Optional[MessageEnvelope] = None) -> Event:
        if time < self.clock:
            raise EngineError(f"Cannot schedule an event at {time}, clock is already {self.clock}")
        event = Event(time, next(self._seq), kind, envelope)
        heapq.heappush(self._heap, event)
        return event

    def peek_time(self) -> int:
        if not self._heap:
            raise EngineError("peek on an empty event queue")
        return self._heap[0].time

    def pop(self) -> Event:
        if not self._heap:
            raise EngineError("pop from an empty event queue")
        event = heapq.heappop(self._heap)
        assert event.time >= self.clock, "event processed out of order"
        self.clock = event.time
        return event

    def pending(self) -> List[Event]:
        return sorted(self._heap)


class TraceEntry(NamedTuple):
    time: int
    drone: str
    label: str
    emitted: int


class DeliveryRecord(NamedTuple):
    time: int
    kind: MessageKind
    delivered: bool


@dataclass(frozen=True)
class StopCondition:
    """Stop once the next event lies past max_ticks; a run also ends when every drone has departed."""

    max_ticks: int


@dataclass
class Trace:
    rows: List[TraceEntry]
    deliveries: List[DeliveryRecord]
    ledger: Ledger
    clusters: Dict[int, Tuple[DroneId, ...]]
    initial_units: Dict[DroneId, int]
    final_units: Dict[DroneId, int]
    end_time: int = 0
    in_flight: int = 0
    completed: bool = True
    seed: Optional[int] = None

    @property
    def drones(self) -> List[DroneId]:
        return [d for members in self.clusters.values() for d in members]

    @cached_property
    def report(self):
        from fleet_metrics import aggregate

        return aggregate(self)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    def conservation_gap(self) -> int:
        """Initial minus final charge minus everything the ledger recorded (0 when conserved)."""
        spent = sum(self.initial_units.values()) - sum(self.final_units.values())
        return spent - self.ledger.total_units

    def hash(self) -> str:
        digest = hashlib.sha256()
        for row in self.rows:
            digest.update(f"{row.time},{row.drone},{row.label},{row.emitted}\n".encode())
        for rec in self.deliveries:
            digest.update(f"{rec.time},{rec.kind.value},{int(rec.delivered)}\n".encode())
        for row in self.ledger.rows():
            digest.update((",".join(map(str, row)) + "\n").encode())
        return digest.hexdigest()


Observer = Callable[["Simulation", Event], None]


class Simulation:
    """One run of one scenario. Not reusable: build a new one per run."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.energy = scenario.energy
        self.sizes = scenario.sizes
        self.gbs = scenario.gbs
        self.clusters = scenario.clusters
        self.links = scenario.links
        self.states: Dict[DroneId, DroneState] = dict(scenario.states)
        self.order = sorted(self.states)
        self.queue = EventQueue()
        self.ledger = Ledger()
        self.rows: List[TraceEntry] = []
        self.deliveries: List[DeliveryRecord] = []
        self.in_flight: Counter = Counter()
        self.now = 0
        self._ran = False

    # --- bookkeeping -------------------------------------------------

    def live(self, drone_id: DroneId) -> bool:
        return self.states[drone_id].is_live

    def _context(self, drone_id: DroneId) -> StepContext:
        cluster = drone_id.cluster_index
        return StepContext(self.now, self.sizes, self.gbs, self.energy.critical_fraction,
                           lambda: self._cluster_centroid(cluster))

    def _cluster_centroid(self, cluster: int) -> Position:
        return centroid(self.states[d].home for d in self.clusters[cluster] if self.live(d))

    def _charge(self, drone_id: DroneId, cause: DrainCause, mj: float) -> None:
        units = to_units(mj)
        if units <= 0:
            return
        state = self.states[drone_id]
        applied = min(units, state.battery.level_units)
        battery, _ = apply_drain(state.battery, applied, self.energy.critical_fraction, in_units=True)
        self.states[drone_id] = replace(state, battery=battery)
        self.ledger.record(self.now, drone_id, cause, applied)

    def _cluster_of(self, env: MessageEnvelope) -> int:
        if isinstance(env.src, DroneId):
            return env.src.cluster_index
        return env.dst.cluster_index

    def _neighbours(self, drone_id: DroneId) -> List[DroneId]:
        """Live drones linked to drone_id, in id order."""
        return sorted(d for d in self.links.neighbors(drone_id) if self.live(d))

    def _tx_distance(self, origin: Position, env: MessageEnvelope) -> float:
        if env.dst == GBS:
            return distance(origin, self.gbs)
        if env.is_broadcast:
            peers = [self.states[d].position for d in self._neighbours(env.src)]
            return max((distance(origin, p) for p in peers), default=0.0)
        return distance(origin, self.states[env.dst].position)

    def _send(self, origin: Position, envelopes: List[MessageEnvelope]) -> None:
        for env in envelopes:
            if isinstance(env.src, DroneId):
                self._charge(env.src, DrainCause.TX, tx_cost(self.energy, env.payload_bytes,
                                                             self._tx_distance(origin, env)))
            self._schedule_delivery(env, env.send_time + 1)

    def _schedule_delivery(self, env: MessageEnvelope, at: int) -> None:
        self.queue.schedule(at, EventKind.DELIVER, env)
        self.in_flight[(self._cluster_of(env), env.kind)] += 1

    def _record(self, drone: Union[DroneId, str], label: str, emitted: int = 0) -> None:
        self.rows.append(TraceEntry(self.now, str(drone), label, emitted))

    # --- transitions -------------------------------------------------

    def _apply(self, drone_id: DroneId, label: str, fn: Callable[[DroneState, StepContext], Transition]) -> None:
        before = self.states[drone_id]
        state, out = fn(before, self._context(drone_id))
        self.states[drone_id] = state
        self._record(drone_id, label, len(out))
        # a drone transmits from where it was when the input arrived
        self._send(before.position, out)
        self._note_departure(before, state)
        self._post_drain(drone_id)

    def _post_drain(self, drone_id: DroneId) -> None:
        while True:
            before = self.states[drone_id]
            state, out, label = on_drain(before, self._context(drone_id))
            if label is None:
                return
            self.states[drone_id] = state
            self._record(drone_id, label, len(out))
            self._send(before.position, out)
            self._note_departure(before, state)

    def _note_departure(self, before: DroneState, after: DroneState) -> None:
        if before.is_live and not after.is_live:
            logger.debug("%s departed at %d with %d units left", after.id, self.now, after.battery.level_units)
            self._record(after.id, "depart")

    def _process_tick(self, stop: StopCondition) -> None:
        for drone_id in self.order:
            if not self.live(drone_id):
                continue
            self._charge(drone_id, DrainCause.IDLE, idle_cost(self.energy, 1))
            if senses(self.states[drone_id]):
                self._charge(drone_id, DrainCause.SENSE, sense_cost(self.energy, 1))
            if holds_gbs_link(self.states[drone_id]):
                d = distance(self.states[drone_id].position, self.gbs)
                self._charge(drone_id, DrainCause.TX, beacon_cost(self.energy, d))
            self._apply(drone_id, "tick", on_tick)
        if any(self.live(d) for d in self.order) and self.now + 1 <= stop.max_ticks:
            self.queue.schedule(self.now + 1, EventKind.TICK)

    def _drop(self, env: MessageEnvelope) -> None:
        logger.debug("Dropped %s from %s to %s at %d", env.kind.value, env.src, env.dst, self.now)
        self.deliveries.append(DeliveryRecord(self.now, env.kind, False))
        self._record(env.dst, "drop")

    def _deliver_to(self, drone_id: DroneId, env: MessageEnvelope) -> None:
        self._charge(drone_id, DrainCause.RX, rx_cost(self.energy, env.payload_bytes))
        self._apply(drone_id, env.kind.value, lambda s, ctx: handle(s, env, ctx))

    def deliver(self, env: MessageEnvelope) -> None:
        self.in_flight[(self._cluster_of(env), env.kind)] -= 1
        if env.dst == GBS:
            self.deliveries.append(DeliveryRecord(self.now, env.kind, True))
            self._record(GBS, env.kind.value)
            return
        if env.is_broadcast:
            recipients = self._neighbours(env.src)
            if not recipients:
                self._drop(env)
                return
            self.deliveries.append(DeliveryRecord(self.now, env.kind, True))
            for drone_id in recipients:
                if self.live(drone_id):
                    self._deliver_to(drone_id, env)
            return
        if not self.live(env.dst):
            self._drop(env)
            return
        self.deliveries.append(DeliveryRecord(self.now, env.kind, True))
        self._deliver_to(env.dst, env)

    # --- driver --------------------------------------------------------

    def run(self, stop: Optional[StopCondition] = None, observer: Optional[Observer] = None) -> Trace:
        """
        Process events in (time, seq) order until every drone has departed and
        the queue is drained, or until the next event lies beyond max_ticks.
        """
        if self._ran:
            raise EngineError("A Simulation runs once; build a new one for another run")
        self._ran = True
        stop = stop or StopCondition(self.scenario.config.max_ticks)
        initial_units = {d: s.battery.level_units for d, s in self.states.items()}

        for drone_id in self.order:
            if not self.live(drone_id):
                self._record(drone_id, "depart")
        for env in self.scenario.initial_envelopes:
            self._schedule_delivery(env, env.send_time)
        if any(self.live(d) for d in self.order):
            self.queue.schedule(0, EventKind.TICK)

        while self.queue:
            if self.queue.peek_time() > stop.max_ticks:
                break
            event = self.queue.pop()
            self.now = event.time
            if event.kind is EventKind.TICK:
                self._process_tick(stop)
            else:
                self.deliver(event.envelope)
            if observer is not None:
                observer(self, event)

        in_flight = sum(1 for e in self.queue.pending() if e.kind is EventKind.DELIVER)
        completed = not any(self.live(d) for d in self.order)
        if not completed:
            logger.warning("Run stopped at tick %d with %d live drones (lifetimes censored)",
                           self.now, sum(self.live(d) for d in self.order))
        return Trace(
            rows=self.rows,
            deliveries=self.deliveries,
            ledger=self.ledger,
            clusters=self.clusters,
            initial_units=initial_units,
            final_units={d: s.battery.level_units for d, s in self.states.items()},
            end_time=self.now,
            in_flight=in_flight,
            completed=completed,
            seed=self.scenario.config.seed,
        )


def run(scenario: Scenario, stop: Optional[StopCondition] = None, observer: Optional[Observer] = None) -> Trace:
    return Simulation(scenario).run(stop, observer)


def simulate(config: ScenarioConfig, observer: Optional[Observer] = None) -> Trace:
    """Build the scenario for config and run it to completion (or max_ticks)."""
    return Simulation(instantiate(config)).run(observer=observer)


def quiescent(sim: Simulation, cluster: int) -> bool:
    """No Init or ElectionMessage in flight for this cluster."""
    return (sim.in_flight[(cluster, MessageKind.ELECTION_MESSAGE)] == 0
            and sim.in_flight[(cluster, MessageKind.INIT)] == 0)


def role_counts(sim: Simulation, cluster: int) -> Dict[Role, int]:
    return Counter(sim.states[d].role for d in sim.clusters[cluster])
