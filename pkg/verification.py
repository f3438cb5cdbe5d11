"""
Acceptance suite behind `fleet_cli verify`.

Each check runs real simulations and returns a CheckResult; run_suite prints
a pass/fail table. Battery capacities are reduced relative to the scenario
defaults so the suite finishes at desk scale (lifetime ratios do not depend
on the capacity).
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from tqdm.auto import tqdm

from energy_model import EnergyModel
from event_engine import EventKind, Simulation, TraceEntry, quiescent, role_counts, simulate
from fleet_metrics import aggregate, run_metrics, sweep
from fleet_model import BROADCAST, GBS_POSITION, Battery, DroneId, Position, Role
from leader_protocol import (
    DroneState,
    MessageEnvelope,
    MessageKind,
    PayloadSizes,
    Phase,
    StepContext,
    on_battery_report,
    on_data,
    on_leave,
    on_wakeup,
    select_gbest,
    start_election,
)
from scenario import Mode, ScenarioConfig, instantiate

logger = logging.getLogger(__name__)

ORACLE_CONFIG = ScenarioConfig(
    clusters=1,
    drones_per_cluster=2,
    threshold=10,
    buffer_capacity=2,
    cluster_radius=0,
    battery_capacity=1.0,
    battery_jitter_fraction=0,
    energy=EnergyModel(idle_per_tick=0, sense_per_sample=0, beacon_bytes=0),
    seed=0,
    max_ticks=5,
)

# hand-derived: 0.0 leads from the midpoint (0, 0, 50), hands over to 0.1 at tick 4
ORACLE_ROWS = [
    TraceEntry(0, "0.0", "init", 1),
    TraceEntry(0, "0.1", "init", 0),
    TraceEntry(0, "0.0", "tick", 0),
    TraceEntry(0, "0.1", "tick", 0),
    TraceEntry(1, "0.1", "election", 0),
    TraceEntry(1, "0.0", "tick", 1),
    TraceEntry(1, "0.1", "tick", 1),
    TraceEntry(2, "GBS", "base", 0),
    TraceEntry(2, "0.0", "data", 0),
    TraceEntry(2, "0.0", "tick", 1),
    TraceEntry(2, "0.0", "threshold", 1),
    TraceEntry(2, "0.1", "tick", 1),
    TraceEntry(3, "GBS", "base", 0),
    TraceEntry(3, "0.1", "wakeup", 1),
    TraceEntry(3, "0.0", "data", 0),
    TraceEntry(3, "0.0", "tick", 1),
    TraceEntry(3, "0.1", "tick", 1),
    TraceEntry(4, "0.0", "report", 1),
    TraceEntry(4, "GBS", "base", 0),
    TraceEntry(4, "0.0", "data", 1),
    TraceEntry(4, "0.0", "tick", 1),
    TraceEntry(4, "0.1", "tick", 1),
    TraceEntry(5, "0.1", "election", 0),
    TraceEntry(5, "0.1", "data", 0),
    TraceEntry(5, "0.1", "data", 1),
    TraceEntry(5, "0.0", "data", 1),
    TraceEntry(5, "0.0", "tick", 1),
    TraceEntry(5, "0.1", "tick", 0),
]
ORACLE_FINAL_UNITS = {DroneId(0, 0): 786_000_000, DroneId(0, 1): 874_400_000}
ORACLE_MESSAGES = {
    MessageKind.INIT: 2,
    MessageKind.ELECTION_MESSAGE: 2,
    MessageKind.BASE_MESSAGE: 3,
    MessageKind.DATA: 6,
    MessageKind.WAKEUP_ELECTION: 1,
    MessageKind.BATTERY_REPORT: 1,
}
ORACLE_IN_FLIGHT = 3


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


class SuiteSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    battery_capacity: float = 100.0
    reps: int = 10
    conservation_scenarios: int = 100
    safety_scenarios: int = 30
    base_seed: int = 2024
    lifetime_ratio_floor: float = 1.2
    death_time_cv_limit: float = 0.10

    @classmethod
    def for_mode(cls, quick: bool) -> "SuiteSettings":
        if quick:
            return cls(battery_capacity=30.0, reps=3, conservation_scenarios=20, safety_scenarios=8)
        return cls()

    def base_config(self, **changes) -> ScenarioConfig:
        return ScenarioConfig(battery_capacity=self.battery_capacity, seed=self.base_seed).replace(**changes)


# --- oracle, conservation, determinism -------------------------------------


def check_oracle() -> CheckResult:
    trace = simulate(ORACLE_CONFIG)
    report = aggregate(trace)
    problems = []
    if trace.rows != ORACLE_ROWS:
        first = next((i for i, (a, b) in enumerate(zip(trace.rows, ORACLE_ROWS)) if a != b),
                     min(len(trace.rows), len(ORACLE_ROWS)))
        problems.append(f"trace diverges at row {first}")
    if trace.final_units != ORACLE_FINAL_UNITS:
        problems.append(f"final charge {trace.final_units}")
    if report.messages_by_kind != ORACLE_MESSAGES:
        problems.append(f"messages {report.messages_by_kind}")
    if trace.in_flight != ORACLE_IN_FLIGHT:
        problems.append(f"in flight {trace.in_flight}")
    if trace.conservation_gap() != 0:
        problems.append(f"conservation gap {trace.conservation_gap()}")
    return CheckResult("oracle", not problems, "; ".join(problems) or f"{len(trace.rows)} rows match")


def random_config(rng: np.random.Generator, **changes) -> ScenarioConfig:
    """A small randomized scenario (n <= 3, m <= 6, at most 5000 ticks)."""
    energy = EnergyModel(
        idle_per_tick=float(rng.choice([0.0, 0.002, 0.01])),
        sense_per_sample=float(rng.choice([0.0, 0.001])),
        beacon_bytes=int(rng.choice([0, 64, 256])),
        critical_fraction=float(rng.uniform(0.02, 0.3)),
    )
    config = ScenarioConfig(
        clusters=int(rng.integers(1, 4)),
        drones_per_cluster=int(rng.integers(1, 7)),
        mode=Mode.BASELINE if rng.random() < 0.2 else Mode.LEADER_BASED,
        threshold=float(rng.uniform(5, 95)),
        buffer_capacity=int(rng.integers(1, 12)),
        cluster_radius=float(rng.uniform(0, 40)),
        battery_capacity=float(rng.uniform(2, 10)),
        battery_jitter_fraction=float(rng.uniform(0, 0.5)),
        energy=energy,
        seed=int(rng.integers(0, 2**63)),
        max_ticks=int(rng.integers(50, 5001)),
    )
    return config.replace(**changes) if changes else config


def check_conservation(count: int, seed: int = 7) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures = []
    for _ in tqdm(range(count), desc="conservation", leave=False):
        config = random_config(rng)
        trace = simulate(config)
        if trace.conservation_gap() != 0:
            failures.append((config.seed, trace.conservation_gap()))
    if failures:
        return CheckResult("conservation", False, f"{len(failures)}/{count} runs leak energy, e.g. {failures[0]}")
    return CheckResult("conservation", True, f"{count} randomized runs exact")


def check_determinism(config: ScenarioConfig, seeds: Optional[Tuple[int, int]] = None,
                      grid: Sequence[float] = (30, 70), reps: int = 2) -> CheckResult:
    first, second = seeds or (config.seed, config.seed)
    hashes = [simulate(config.replace(seed=s)).hash() for s in (first, second)]
    if hashes[0] != hashes[1]:
        return CheckResult("determinism", False, f"paired runs differ: {hashes[0][:12]} vs {hashes[1][:12]}")
    for threshold in grid:
        for rep in range(reps):
            cell = config.replace(threshold=threshold, seed=config.seed + rep)
            if run_metrics(cell)["trace_hash"] != run_metrics(cell)["trace_hash"]:
                return CheckResult("determinism", False, f"T={threshold} rep {rep} not reproducible")
    return CheckResult("determinism", True, f"hash {hashes[0][:12]} stable")


# --- directional properties ------------------------------------------------


def check_lifetime_advantage(settings: SuiteSettings) -> CheckResult:
    config = settings.base_config(clusters=2, drones_per_cluster=6, threshold=60)
    table = sweep(config, "mode", ["leader_based", "baseline"], settings.reps, progress=False)
    lifetimes = dict(zip(table["mode"], table["mean_cluster_lifetime"]))
    ratio = lifetimes["leader_based"] / lifetimes["baseline"]
    detail = f"leader-based/baseline lifetime ratio {ratio:.2f}"
    return CheckResult("lifetime advantage", bool(ratio >= settings.lifetime_ratio_floor), detail)


def _non_decreasing(values: Sequence[float]) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))


def check_fleet_size(settings: SuiteSettings) -> CheckResult:
    table = sweep(settings.base_config(), "fleet_size", [2, 4, 8], settings.reps,
                  modes=[Mode.LEADER_BASED], progress=False)
    lifetimes = table["mean_cluster_lifetime"].tolist()
    detail = "lifetimes " + ", ".join(f"m={m}: {v:.0f}" for m, v in zip(table["value"], lifetimes))
    return CheckResult("fleet-size monotonicity", _non_decreasing(lifetimes), detail)


@lru_cache(maxsize=4)
def _threshold_sweep(settings: SuiteSettings):
    return sweep(settings.base_config(), "threshold", [20, 40, 60, 80], settings.reps,
                 modes=[Mode.LEADER_BASED], progress=False)


def check_election_count(settings: SuiteSettings) -> CheckResult:
    table = _threshold_sweep(settings)
    counts = table["election_count_mean"].tolist()
    # read from high T to low T: elections must not get rarer as T drops
    ok = _non_decreasing(counts[::-1])
    detail = "elections " + ", ".join(f"T={t}: {c:.1f}" for t, c in zip(table["value"], counts))
    return CheckResult("election-count monotonicity", ok, detail)


def check_death_time_stability(settings: SuiteSettings) -> CheckResult:
    deaths = _threshold_sweep(settings)["mean_death_time"].to_numpy()
    cv = float(np.std(deaths) / np.mean(deaths))
    return CheckResult("death-time stability", cv < settings.death_time_cv_limit, f"CV {cv:.3f}")


# --- safety ----------------------------------------------------------------


ELECTION_KINDS = frozenset({
    MessageKind.WAKEUP_ELECTION,
    MessageKind.BATTERY_REPORT,
    MessageKind.ELECTION_MESSAGE,
    MessageKind.LEAVE_MESSAGE,
})


class SafetyObserver:
    """
    Engine observer asserting the protocol safety properties after every event.

    Besides the per-event state checks it watches the queue for envelopes sent
    by drones that had already departed, and bounds the election traffic a
    cluster of m drones may need (wakeup, reports, leaves and the result: at
    most 2m + 1 envelopes per election).
    """

    def __init__(self):
        self.violations: List[str] = []
        self.departed: Set[DroneId] = set()
        self.reports: Dict[DroneId, Dict[DroneId, int]] = defaultdict(dict)
        self.electing: Set[DroneId] = set()
        self.election_traffic: Dict[DroneId, int] = {}
        self.last_seq = -1

    def _fail(self, sim: Simulation, message: str) -> None:
        self.violations.append(f"t={sim.now}: {message}")

    def __call__(self, sim: Simulation, event) -> None:
        self._check_senders(sim)
        if event.kind is EventKind.DELIVER:
            if event.envelope.kind in ELECTION_KINDS:
                self._count_election_traffic(sim, event.envelope)
            self._check_election(sim, event.envelope)
        for cluster, members in sim.clusters.items():
            leaders = role_counts(sim, cluster)[Role.LEADER]
            if leaders > 1:
                self._fail(sim, f"cluster {cluster} has {leaders} leaders")
            # a handed-over leader relaying its last ticks does not count
            settled = [d for d in members if sim.live(d) and sim.states[d].linger_until is None]
            direct = any(sim.states[d].direct_to_gbs for d in members)
            if not settled or direct or not quiescent(sim, cluster):
                continue
            if leaders != 1:
                self._fail(sim, f"cluster {cluster} quiescent with {leaders} leaders")
                continue
            leader = next(d for d in members if sim.states[d].role is Role.LEADER)
            for drone_id in settled:
                state = sim.states[drone_id]
                if state.role is Role.MEMBER and not state.departing and state.known_leader != leader:
                    self._fail(sim, f"{drone_id} follows {state.known_leader}, cluster {cluster} is led by {leader}")
        for drone_id, state in sim.states.items():
            if len(state.buffer) > state.buffer_capacity:
                self._fail(sim, f"{drone_id} buffers {len(state.buffer)} > {state.buffer_capacity}")
            if drone_id in self.departed and state.is_live:
                self._fail(sim, f"{drone_id} came back after departing")
            if not state.is_live:
                self.departed.add(drone_id)

    def _check_senders(self, sim: Simulation) -> None:
        """Envelopes scheduled by the last event must not come from a drone departed before it."""
        for queued in sim.queue.pending():
            if queued.seq <= self.last_seq:
                continue
            self.last_seq = max(self.last_seq, queued.seq)
            env = queued.envelope
            if env is not None and env.src in self.departed:
                self._fail(sim, f"departed {env.src} sent {env.kind.value} to {env.dst}")

    def _count_election_traffic(self, sim: Simulation, env: MessageEnvelope) -> None:
        cluster = env.src.cluster_index
        if env.kind is MessageKind.WAKEUP_ELECTION:
            self.election_traffic[env.src] = 0
        bound = 2 * len(sim.clusters[cluster]) + 1
        for leader in [d for d in self.election_traffic if d.cluster_index == cluster]:
            if not sim.live(leader) and leader != env.src:
                # gone without announcing a result
                del self.election_traffic[leader]
                continue
            self.election_traffic[leader] += 1
            if self.election_traffic[leader] > bound:
                self._fail(sim, f"election by {leader} still open after {bound} envelopes")
                del self.election_traffic[leader]
        if env.kind is MessageKind.ELECTION_MESSAGE:
            self.election_traffic.pop(env.src, None)

    def _check_election(self, sim: Simulation, env: MessageEnvelope) -> None:
        if env.kind is MessageKind.WAKEUP_ELECTION:
            self.reports[env.src] = {}
            self.electing.add(env.src)
        elif env.kind is MessageKind.BATTERY_REPORT:
            self.reports[env.dst][env.subject] = env.level_units
        elif env.kind is MessageKind.ELECTION_MESSAGE and env.src in self.electing:
            self.electing.discard(env.src)
            reports = {d: lvl for d, lvl in self.reports.pop(env.src, {}).items() if d in env.roster}
            if not reports:
                return
            best = max(reports.values())
            if env.subject == env.src:
                if sim.states[env.src].battery.b0_units < best:
                    self._fail(sim, f"{env.src} kept leadership below a reported level {best}")
            elif reports.get(env.subject) != best or env.subject != min(d for d, lvl in reports.items() if lvl == best):
                self._fail(sim, f"{env.src} named {env.subject}, not the gBest of {reports}")


def _race_cases() -> List[str]:
    """Targeted race cases on the pure handlers; returns the failures."""
    failures = []
    sizes = PayloadSizes()
    a, b, c = DroneId(0, 0), DroneId(0, 1), DroneId(0, 2)
    ctx = StepContext(10, sizes, GBS_POSITION, 0.05, lambda: Position(0, 0, 100))
    roster = frozenset({a, b, c})
    home = Position(0, 0, 100)

    def drone(drone_id, role, level, **fields):
        return DroneState(drone_id, role, home, home, Battery(1000, level, level), 5, 50.0,
                          known_leader=a, roster=roster, phase=Phase.UPDATE, initialized=True, **fields)

    leader, _ = start_election(drone(a, Role.LEADER, 400), ctx)

    def report(drone_id, level):
        return MessageEnvelope(MessageKind.BATTERY_REPORT, drone_id, a, sizes.report, 9,
                               subject=drone_id, level_units=level)

    # leave during an election: the leaver's report must not be waited for
    after_b, _ = on_battery_report(leader, report(b, 700), ctx)
    leave = MessageEnvelope(MessageKind.LEAVE_MESSAGE, c, a, sizes.leave, 9, subject=c)
    done, out = on_leave(after_b, leave, ctx)
    if done.election_pending or not out or out[0].subject != b:
        failures.append("leave during election did not complete the election")

    # duplicate wakeup: the member answers twice, the leader keeps only the latest report
    member = drone(b, Role.MEMBER, 700)
    wakeup = MessageEnvelope(MessageKind.WAKEUP_ELECTION, a, BROADCAST, sizes.wakeup, 9)
    member, first = on_wakeup(member, wakeup, ctx)
    member, second = on_wakeup(member, wakeup, ctx)
    pending, _ = on_battery_report(leader, report(b, 700), ctx)
    pending, _ = on_battery_report(pending, report(b, 650), ctx)
    if len(first) != 1 or len(second) != 1 or [r.level_units for r in pending.pending_reports] != [650]:
        failures.append("duplicate wakeup produced a duplicate report")

    # stale data at a demoted leader is relayed to the new one
    demoted = replace(drone(a, Role.MEMBER, 300), known_leader=b)
    data = MessageEnvelope(MessageKind.DATA, c, a, sizes.data, 9)
    _, relayed = on_data(demoted, data, ctx)
    if [(e.kind, e.dst) for e in relayed] != [(MessageKind.DATA, b)]:
        failures.append("stale data was not relayed to the current leader")

    if select_gbest([], 5, a) != a:
        failures.append("lone candidate not selected")
    return failures


def check_safety(count: int, seed: int = 11) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures = _race_cases()
    for _ in tqdm(range(count), desc="safety", leave=False):
        # small buffers, high thresholds and wide critical bands make elections and leaves overlap
        config = random_config(rng, mode=Mode.LEADER_BASED)
        observer = SafetyObserver()
        Simulation(instantiate(config)).run(observer=observer)
        if observer.violations:
            failures.append(f"seed {config.seed}: {observer.violations[0]}")
    if failures:
        return CheckResult("protocol safety", False, f"{len(failures)} failures, e.g. {failures[0]}")
    return CheckResult("protocol safety", True, f"{count} observed runs and race cases clean")


# --- suite -----------------------------------------------------------------


Check = Tuple[str, Callable[[], CheckResult]]


def build_checks(quick: bool = False) -> List[Check]:
    settings = SuiteSettings.for_mode(quick)
    return [
        ("oracle", check_oracle),
        ("conservation", lambda: check_conservation(settings.conservation_scenarios)),
        ("determinism", lambda: check_determinism(settings.base_config())),
        ("lifetime advantage", lambda: check_lifetime_advantage(settings)),
        ("fleet-size monotonicity", lambda: check_fleet_size(settings)),
        ("election-count monotonicity", lambda: check_election_count(settings)),
        ("death-time stability", lambda: check_death_time_stability(settings)),
        ("protocol safety", lambda: check_safety(settings.safety_scenarios)),
    ]


def run_suite(quick: bool = False, checks: Optional[List[Check]] = None) -> List[CheckResult]:
    results = []
    for name, check in checks if checks is not None else build_checks(quick):
        logger.info("Running check: %s", name)
        try:
            result = check()
        except Exception as exc:  # a crashing check is a failed check
            logger.exception("Check %s raised", name)
            result = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        marker = "✅" if result.passed else "❌"
        print(f"{marker} {result.name:<28} {result.detail}")
        results.append(result)
    return results
