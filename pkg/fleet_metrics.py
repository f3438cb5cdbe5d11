"""
Metrics over finished runs and parameter sweeps.

aggregate() turns one Trace into a MetricsReport (death times, cluster
lifetimes, message counts, elections, events at death). sweep() repeats
runs over an axis of thresholds, fleet sizes or modes and tabulates the
means for plotting.
"""

import hashlib
import logging
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from event_engine import Trace, simulate
from energy_model import DrainCause
from fleet_model import DroneId, format_units
from leader_protocol import MessageKind
from scenario import ConfigError, Mode, ScenarioConfig, parse_mode

logger = logging.getLogger(__name__)

SWEEP_AXES = ("threshold", "fleet_size", "mode")
SWEEP_COLUMNS = [
    "axis",
    "value",
    "mode",
    "mean_cluster_lifetime",
    "std_cluster_lifetime",
    "mean_death_time",
    "election_count_mean",
    "messages_total_mean",
    "drops_mean",
]
EVENTS_ON_DEATH_COLUMNS = ["drone", "cluster", "death_time", "events_at_death"]


@dataclass(frozen=True)
class MetricsReport:
    cluster_lifetime: Dict[int, int]
    death_time: Dict[DroneId, int]
    messages_by_kind: Dict[MessageKind, int]
    election_count: int
    events_total: int
    drops: int
    events_at_death: Dict[DroneId, int] = field(default_factory=dict)
    censored_clusters: Tuple[int, ...] = ()
    in_flight: int = 0

    @property
    def messages_total(self) -> int:
        return sum(self.messages_by_kind.values())

    @property
    def mean_cluster_lifetime(self) -> Optional[float]:
        if not self.cluster_lifetime:
            return None
        return float(np.mean(list(self.cluster_lifetime.values())))

    @property
    def mean_death_time(self) -> Optional[float]:
        if not self.death_time:
            return None
        return float(np.mean(list(self.death_time.values())))

    @property
    def censored(self) -> bool:
        return bool(self.censored_clusters)


def aggregate(trace: Trace) -> MetricsReport:
    """
    Compute the run metrics from a trace.

    Clusters with a drone still alive when the run stopped are listed in
    censored_clusters and get no lifetime. Events are the rows a drone
    processed (drops are not counted, GBS receipts belong to no drone).
    """
    death_time: Dict[DroneId, int] = {}
    events: Counter = Counter()
    events_at_death: Dict[DroneId, int] = {}
    for row in trace.rows:
        if row.label == "drop" or row.drone == "GBS":
            continue
        drone = DroneId.parse(row.drone)
        events[drone] += 1
        if row.label == "depart":
            death_time[drone] = row.time
            events_at_death[drone] = events[drone]

    cluster_lifetime: Dict[int, int] = {}
    censored: List[int] = []
    for cluster, drones in sorted(trace.clusters.items()):
        if all(d in death_time for d in drones):
            cluster_lifetime[cluster] = max(death_time[d] for d in drones)
        else:
            censored.append(cluster)

    messages_by_kind = Counter(rec.kind for rec in trace.deliveries)
    return MetricsReport(
        cluster_lifetime=cluster_lifetime,
        death_time=death_time,
        messages_by_kind=dict(messages_by_kind),
        election_count=messages_by_kind[MessageKind.ELECTION_MESSAGE],
        events_total=sum(events.values()),
        drops=sum(1 for rec in trace.deliveries if not rec.delivered),
        events_at_death=events_at_death,
        censored_clusters=tuple(censored),
        in_flight=trace.in_flight,
    )


def events_on_death_frame(report: MetricsReport) -> pd.DataFrame:
    rows = [
        (str(d), d.cluster_index, report.death_time[d], report.events_at_death[d])
        for d in sorted(report.death_time, key=lambda d: (report.death_time[d], d))
    ]
    return pd.DataFrame(rows, columns=EVENTS_ON_DEATH_COLUMNS)


def summary_record(report: MetricsReport) -> Dict[str, Any]:
    """JSON-ready summary of a report."""
    return {
        "cluster_lifetime": {str(c): t for c, t in report.cluster_lifetime.items()},
        "censored_clusters": list(report.censored_clusters),
        "mean_cluster_lifetime": report.mean_cluster_lifetime,
        "mean_death_time": report.mean_death_time,
        "death_time": {str(d): t for d, t in sorted(report.death_time.items())},
        "messages_by_kind": {k.value: n for k, n in sorted(report.messages_by_kind.items(), key=lambda kv: kv[0].value)},
        "messages_total": report.messages_total,
        "election_count": report.election_count,
        "events_total": report.events_total,
        "events_at_death": {str(d): n for d, n in sorted(report.events_at_death.items())},
        "drops": report.drops,
        "in_flight": report.in_flight,
    }


def energy_breakdown(trace: Trace) -> Dict[str, Dict[str, str]]:
    """Exact mJ spent per drain cause and per drone (drones that spent nothing show 0)."""
    by_drone = trace.ledger.per_drone_units()
    by_cause = trace.ledger.per_cause_units()
    return {
        "energy_by_cause": {cause.value: format_units(by_cause.get(cause, 0)) for cause in DrainCause},
        "energy_by_drone": {str(d): format_units(by_drone.get(d, 0)) for d in trace.drones},
    }


# --- sweeps ----------------------------------------------------------------


def derive_seed(base_seed: int, axis: str, value: Any, rep: int) -> int:
    """Per-run seed: first 8 bytes of sha256("base:axis:value:rep"), big endian."""
    digest = hashlib.sha256(f"{base_seed}:{axis}:{value}:{rep}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _normalize_value(axis: str, value: Union[str, float, int]) -> Union[str, float, int]:
    try:
        if axis == "threshold":
            number = float(value)
            return int(number) if number.is_integer() else number
        if axis == "fleet_size":
            return int(value)
        return parse_mode(value).value
    except (TypeError, ValueError) as exc:
        raise ConfigError("values", f"bad {axis} value '{value}': {exc}") from None


def _configure(config: ScenarioConfig, axis: str, value: Any, mode: Mode, rep: int) -> ScenarioConfig:
    # the seed ignores the mode so both modes of a repetition share positions and charges
    seed_value = "*" if axis == "mode" else value
    changes: Dict[str, Any] = {"mode": mode, "seed": derive_seed(config.seed, axis, seed_value, rep)}
    if axis == "threshold":
        changes["threshold"] = value
    elif axis == "fleet_size":
        changes["drones_per_cluster"] = value
    return config.replace(**changes)


def run_metrics(config: ScenarioConfig) -> Dict[str, Any]:
    """Run one configuration and keep the numbers a sweep row needs."""
    trace = simulate(config)
    report = aggregate(trace)
    if report.censored:
        logger.warning("Run with seed %d censored clusters %s at tick %d",
                       config.seed, list(report.censored_clusters), trace.end_time)
    return {
        "cluster_lifetime": report.mean_cluster_lifetime,
        "death_time": report.mean_death_time,
        "election_count": report.election_count,
        "messages_total": report.messages_total,
        "drops": report.drops,
        "trace_hash": trace.hash(),
    }


def _nan_stats(values: List[Optional[float]]) -> Tuple[float, float]:
    arr = np.array([np.nan if v is None else v for v in values], dtype=float)
    if np.isnan(arr).all():
        return float("nan"), float("nan")
    return float(np.nanmean(arr)), float(np.nanstd(arr))


def sweep(
    config: ScenarioConfig,
    axis: str,
    values: Sequence[Any],
    reps: int,
    modes: Sequence[Mode] = (Mode.LEADER_BASED, Mode.BASELINE),
    workers: int = 1,
    progress: bool = True,
) -> pd.DataFrame:
    """
    Run every (value, mode, repetition) of the grid and tabulate the means.

    Args:
        config: base scenario; its seed is the base seed of the sweep
        axis: "threshold", "fleet_size" or "mode"
        values: axis values; for the "mode" axis these are the modes and `modes` is ignored
        reps: repetitions per grid cell
        modes: operating modes to run for every value
        workers: >1 fans runs out over a process pool
        progress: show a tqdm progress bar

    Returns:
        DataFrame with SWEEP_COLUMNS, one row per (value, mode) in grid order
    """
    if axis not in SWEEP_AXES:
        raise ConfigError("axis", f"unknown sweep axis '{axis}' (choose from {', '.join(SWEEP_AXES)})")
    if not values:
        raise ConfigError("values", "empty axis list")
    if reps < 1:
        raise ConfigError("reps", f"repetitions must be at least 1, got {reps}")
    if workers < 1:
        raise ConfigError("workers", f"worker count must be at least 1, got {workers}")

    normalized = list(dict.fromkeys(_normalize_value(axis, v) for v in values))
    cells = [(v, Mode(v)) for v in normalized] if axis == "mode" else [(v, Mode(m)) for v in normalized for m in modes]
    jobs = [(cell, _configure(config, axis, cell[0], cell[1], rep)) for cell in cells for rep in range(reps)]
    logger.info("Sweeping %s over %s: %d runs", axis, normalized, len(jobs))

    configs = [job_config for _, job_config in jobs]
    bar = dict(total=len(jobs), desc=f"sweep {axis}", disable=not progress)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(run_metrics, configs), **bar))
    else:
        results = [run_metrics(c) for c in tqdm(configs, **bar)]

    grouped: Dict[Tuple[Any, Mode], List[Dict[str, Any]]] = defaultdict(list)
    for (cell, _), result in zip(jobs, results):
        grouped[cell].append(result)

    rows = []
    for value, mode in cells:
        runs = grouped[(value, mode)]
        mean_life, std_life = _nan_stats([r["cluster_lifetime"] for r in runs])
        mean_death, _ = _nan_stats([r["death_time"] for r in runs])
        rows.append({
            "axis": axis,
            "value": value,
            "mode": mode.value,
            "mean_cluster_lifetime": mean_life,
            "std_cluster_lifetime": std_life,
            "mean_death_time": mean_death,
            "election_count_mean": float(np.mean([r["election_count"] for r in runs])),
            "messages_total_mean": float(np.mean([r["messages_total"] for r in runs])),
            "drops_mean": float(np.mean([r["drops"] for r in runs])),
        })
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)
