"""
Shared domain types for the drone fleet energy simulator.

Drone identifiers, positions, battery snapshots and the small amount of
geometry (distance, centroid, leader placement) and threshold arithmetic that
every other module builds on.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Annotated, Iterable, Union

from pydantic import Field

# 1 mJ expressed in integer accounting units
ENERGY_SCALE = 10**9

ThresholdPercent = Annotated[float, Field(gt=0, lt=100)]


class FleetSimError(Exception):
    """Base class for every error raised by the simulator."""


class GeometryError(FleetSimError):
    pass


class TopologyError(FleetSimError):
    pass


class Role(str, Enum):
    LEADER = "leader"
    MEMBER = "member"
    DEPARTED = "departed"


@dataclass(frozen=True, order=True)
class DroneId:
    cluster_index: int
    member_index: int

    def __post_init__(self):
        if self.cluster_index < 0 or self.member_index < 0:
            raise ValueError(f"Drone id components must be non-negative: {self.cluster_index}.{self.member_index}")

    def __str__(self) -> str:
        return f"{self.cluster_index}.{self.member_index}"

    @classmethod
    def parse(cls, text: str) -> "DroneId":
        cluster, member = text.split(".")
        return cls(int(cluster), int(member))


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise GeometryError(f"Non-finite position {self}")
        if self.z < 0:
            raise GeometryError(f"Altitude must be non-negative, got {self.z}")


@dataclass(frozen=True)
class Battery:
    """
    Battery charge tracked in integer accounting units (see ENERGY_SCALE).

    The mJ views (`capacity_full`, `level`, `b0_at_election`) are derived; all
    arithmetic happens on the unit fields so that drains add up exactly.
    """

    capacity_units: int
    level_units: int
    b0_units: int

    def __post_init__(self):
        if not 0 <= self.level_units <= self.capacity_units:
            raise ValueError(f"Battery level {self.level_units} outside [0, {self.capacity_units}]")
        if self.b0_units > self.capacity_units:
            raise ValueError("b0_at_election cannot exceed capacity")

    @property
    def capacity_full(self) -> float:
        return self.capacity_units / ENERGY_SCALE

    @property
    def level(self) -> float:
        return self.level_units / ENERGY_SCALE

    @property
    def b0_at_election(self) -> float:
        return self.b0_units / ENERGY_SCALE

    def snapshot_b0(self) -> "Battery":
        return replace(self, b0_units=self.level_units)


Address = Union[DroneId, str]
GBS = "GBS"
BROADCAST = "BROADCAST"
GBS_POSITION = Position(0.0, 0.0, 0.0)


def to_units(mj: float) -> int:
    return int(round(mj * ENERGY_SCALE))


def format_units(units: int) -> str:
    """Exact decimal mJ rendering of an integer unit amount."""
    sign = "-" if units < 0 else ""
    units = abs(units)
    return f"{sign}{units // ENERGY_SCALE}.{units % ENERGY_SCALE:09d}"


def distance(a: Position, b: Position) -> float:
    return math.dist((a.x, a.y, a.z), (b.x, b.y, b.z))


def centroid(positions: Iterable[Position]) -> Position:
    points = list(positions)
    if not points:
        raise GeometryError("Centroid of an empty cluster is undefined")
    n = len(points)
    return Position(
        sum(p.x for p in points) / n,
        sum(p.y for p in points) / n,
        sum(p.z for p in points) / n,
    )


def threshold_level(b0: float, t: float) -> float:
    """
    Battery level B_T at which a leader hands over: B_T = B0 * (1 - T/100).

    Args:
        b0: battery level when the drone became leader (any energy unit)
        t: threshold percentage, strictly between 0 and 100

    Returns:
        The trigger level, in the same unit as b0
    """
    if not 0 < t < 100:
        raise ValueError(f"Threshold must be in (0, 100), got {t}")
    if b0 < 0:
        raise ValueError(f"b0 must be non-negative, got {b0}")
    return b0 * (100 - t) / 100


def leader_position(cluster_centroid: Position, gbs: Position) -> Position:
    """Midpoint between the cluster and the ground station."""
    if cluster_centroid.z <= gbs.z:
        raise GeometryError(
            f"Cluster centroid altitude {cluster_centroid.z} is not above the GBS ({gbs.z})"
        )
    return Position(
        (cluster_centroid.x + gbs.x) / 2,
        (cluster_centroid.y + gbs.y) / 2,
        (cluster_centroid.z + gbs.z) / 2,
    )
