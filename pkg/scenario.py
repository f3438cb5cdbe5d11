"""
Scenario construction: configuration, fleet topology and initial conditions.

A ScenarioConfig comes from a flat `key = value` file (plus `--set`
overrides), build_topology places the drones and links each cluster into a
complete graph, and instantiate wires either operating mode into the states
and initial envelopes the engine starts from.
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, MutableMapping, Optional, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from energy_model import EnergyModel, is_depleted
from fleet_model import GBS, GBS_POSITION, Battery, DroneId, FleetSimError, Position, Role, ThresholdPercent, to_units
from leader_protocol import DroneState, MessageEnvelope, MessageKind, PayloadSizes, Phase, initial_leaders

logger = logging.getLogger(__name__)

PAYLOAD_KINDS = ("init", "data", "base_header", "base_per_sample", "wakeup", "report", "election", "leave")


class ConfigError(FleetSimError):
    def __init__(self, key: str, message: str):
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}")


class Mode(str, Enum):
    LEADER_BASED = "leader_based"
    BASELINE = "baseline"


def parse_mode(value: Union[str, Mode]) -> Mode:
    """Accepts leader_based, LeaderBased, leader-based and baseline in any case."""
    if isinstance(value, Mode):
        return value
    key = str(value).strip().lower().replace("-", "_")
    return Mode({"leaderbased": "leader_based"}.get(key, key))


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    clusters: int = Field(2, ge=1, description="number of clusters n")
    drones_per_cluster: int = Field(6, ge=1, description="drones per cluster m")
    mode: Mode = Mode.LEADER_BASED
    threshold: ThresholdPercent = 60.0
    buffer_capacity: int = Field(10, ge=1)
    altitude: float = Field(100.0, gt=0, description="meters above the GBS")
    cluster_radius: float = Field(20.0, ge=0)
    cluster_spacing: float = Field(100.0, ge=0)
    battery_capacity: float = Field(5000.0, gt=0, description="mJ")
    battery_jitter_fraction: float = Field(0.1, ge=0, lt=1)
    energy: EnergyModel = Field(default_factory=EnergyModel)
    payload_overrides: Dict[str, int] = Field(default_factory=dict)
    seed: int = Field(0, ge=0, lt=2**64)
    max_ticks: int = Field(200_000, ge=1)

    @field_validator("mode", mode="before")
    @classmethod
    def _normalize_mode(cls, value: Any) -> Any:
        return parse_mode(value) if isinstance(value, str) else value

    @field_validator("payload_overrides", mode="before")
    @classmethod
    def _parse_payload_overrides(cls, value: Any) -> Any:
        if isinstance(value, str):
            pairs = {}
            for item in filter(None, (part.strip() for part in value.split(","))):
                kind, sep, size = item.partition(":")
                if not sep:
                    raise ValueError(f"expected kind:bytes, got '{item}'")
                pairs[kind.strip()] = size.strip()
            return pairs
        return value

    @field_validator("payload_overrides")
    @classmethod
    def _check_payload_overrides(cls, value: Dict[str, int]) -> Dict[str, int]:
        for kind, size in value.items():
            if kind not in PAYLOAD_KINDS:
                raise ValueError(f"unknown message kind '{kind}' (known: {', '.join(PAYLOAD_KINDS)})")
            if size <= 0:
                raise ValueError(f"size of '{kind}' must be positive")
        return value

    def replace(self, **changes) -> "ScenarioConfig":
        """Validated copy with some fields changed."""
        return build_config({**self.model_dump(), **changes})


@dataclass(frozen=True)
class Topology:
    positions: Dict[DroneId, Position]
    levels_units: Dict[DroneId, int]
    clusters: Dict[int, Tuple[DroneId, ...]]
    links: nx.Graph
    gbs: Position = GBS_POSITION

    @property
    def drones(self) -> Tuple[DroneId, ...]:
        return tuple(d for members in self.clusters.values() for d in members)


@dataclass(frozen=True)
class Scenario:
    """Everything the engine needs to start a run."""

    config: ScenarioConfig
    topology: Topology
    states: Mapping[DroneId, DroneState]
    initial_envelopes: Tuple[MessageEnvelope, ...]
    sizes: PayloadSizes

    @property
    def energy(self) -> EnergyModel:
        return self.config.energy

    @property
    def gbs(self) -> Position:
        return self.topology.gbs

    @property
    def clusters(self) -> Dict[int, Tuple[DroneId, ...]]:
        return self.topology.clusters

    @property
    def links(self) -> nx.Graph:
        return self.topology.links


# --- configuration ---------------------------------------------------------


def _assign(raw: MutableMapping[str, Any], key: str, value: str) -> None:
    if not key:
        raise ConfigError("<empty>", "missing key before '='")
    head, _, sub = key.partition(".")
    if sub:
        if head != "energy" or sub not in EnergyModel.model_fields:
            raise ConfigError(key, "unknown key")
        section = raw.get("energy")
        if not isinstance(section, dict):
            section = {} if section is None else dict(section)
            raw["energy"] = section
        section[sub] = value
        return
    if key == "energy" or key not in ScenarioConfig.model_fields:
        raise ConfigError(key, "unknown key")
    raw[key] = value


def _split_assignment(text: str, where: str) -> Tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(text.strip() or where, f"expected 'key = value' ({where})")
    return key.strip(), value.strip()


def parse_config_text(text: str) -> Dict[str, Any]:
    """
    Parse the flat configuration format into a raw mapping.

    One `key = value` per line, `#` starts a comment, blank lines are skipped.
    Energy coefficients use dotted keys (`energy.e_amp`). Values stay strings;
    build_config converts and validates them.

    Raises:
        ConfigError: on malformed lines, unknown or repeated keys
    """
    raw: Dict[str, Any] = {}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_assignment(line, f"line {lineno}")
        if key in seen:
            raise ConfigError(key, f"set twice (line {lineno})")
        seen.add(key)
        _assign(raw, key, value)
    return raw


def apply_overrides(raw: MutableMapping[str, Any], overrides: Iterable[str]) -> MutableMapping[str, Any]:
    for override in overrides:
        key, value = _split_assignment(override, "override")
        _assign(raw, key, value)
    return raw


def build_config(raw: Mapping[str, Any]) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"]) or "config"
        raise ConfigError(key, error["msg"]) from None


def load_config(path: Union[str, Path], overrides: Iterable[str] = ()) -> ScenarioConfig:
    """
    Load a scenario configuration file, or the resolved config of a run manifest.

    Args:
        path: a `key = value` file, or a `manifest.json` written by a previous run
        overrides: `key=value` strings applied after the file, last write wins

    Returns:
        The validated ScenarioConfig
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror or exc}") from None
    if path.suffix == ".json":
        try:
            raw = json.loads(text)["config"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise ConfigError("config", f"{path} is not a run manifest") from None
    else:
        raw = parse_config_text(text)
    return build_config(apply_overrides(raw, overrides))


# --- topology and initial conditions ---------------------------------------


def build_topology(config: ScenarioConfig) -> Topology:
    """
    Place every drone in its cluster disc and link each cluster into a complete graph.

    Cluster c is centred at (c * spacing, 0, altitude). Each drone draws three
    seeded uniforms in id order: radius fraction, angle and battery jitter, so
    positions and charges depend on the seed only, never on the mode.
    """
    rng = np.random.default_rng(config.seed)
    capacity_units = to_units(config.battery_capacity)
    positions: Dict[DroneId, Position] = {}
    levels: Dict[DroneId, int] = {}
    clusters: Dict[int, Tuple[DroneId, ...]] = {}
    links = nx.Graph()

    for c in range(config.clusters):
        ids = tuple(DroneId(c, i) for i in range(config.drones_per_cluster))
        clusters[c] = ids
        center_x = c * config.cluster_spacing
        for drone_id in ids:
            u_radius, u_angle, u_jitter = rng.random(3)
            r = config.cluster_radius * math.sqrt(u_radius)
            theta = 2 * math.pi * u_angle
            positions[drone_id] = Position(center_x + r * math.cos(theta), r * math.sin(theta), config.altitude)
            level = config.battery_capacity * (1 - config.battery_jitter_fraction * u_jitter)
            levels[drone_id] = min(capacity_units, to_units(level))
        links.add_nodes_from(ids, cluster=c)
        links.add_edges_from(nx.complete_graph(ids).edges)

    logger.debug("Topology: %d clusters, %d drones, %d links",
                 len(clusters), len(positions), links.number_of_edges())
    return Topology(positions, levels, clusters, links)


def instantiate(config: ScenarioConfig, topology: Optional[Topology] = None) -> Scenario:
    topology = topology or build_topology(config)
    sizes = PayloadSizes(**config.payload_overrides)
    capacity_units = to_units(config.battery_capacity)
    critical = config.energy.critical_fraction
    baseline = config.mode is Mode.BASELINE

    batteries = {
        d: Battery(capacity_units, level, level) for d, level in topology.levels_units.items()
    }
    live = {
        c: tuple(d for d in ids if not is_depleted(batteries[d], critical))
        for c, ids in topology.clusters.items()
    }
    leaders = {} if baseline else initial_leaders({c: ids for c, ids in live.items() if ids})

    states: Dict[DroneId, DroneState] = {}
    for c, ids in topology.clusters.items():
        roster = frozenset(live[c])
        for drone_id in ids:
            state = DroneState(
                id=drone_id,
                role=Role.MEMBER,
                position=topology.positions[drone_id],
                home=topology.positions[drone_id],
                battery=batteries[drone_id],
                buffer_capacity=config.buffer_capacity,
                threshold=config.threshold,
                roster=roster,
            )
            if drone_id not in roster:
                logger.debug("%s starts below the critical level and never joins", drone_id)
                state = replace(state, role=Role.DEPARTED)
            elif baseline:
                state = replace(state, direct_to_gbs=True, initialized=True, phase=Phase.UPDATE)
            elif leaders[c] == drone_id:
                state = replace(state, role=Role.LEADER, known_leader=drone_id)
            states[drone_id] = state

    envelopes: Tuple[MessageEnvelope, ...] = ()
    if not baseline:
        envelopes = tuple(
            MessageEnvelope(MessageKind.INIT, GBS, drone_id, sizes.init, 0)
            for c in sorted(live) for drone_id in live[c]
        )
    return Scenario(config, topology, states, envelopes, sizes)
