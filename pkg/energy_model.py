"""
First-order radio energy model and the drain ledger.

Transmission costs an electronics term plus an amplifier term that grows with
the square of the distance; reception pays the electronics term only. Every
drain a simulation applies is written to a Ledger so the run can be audited
for exact energy conservation.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Tuple, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from fleet_model import Battery, DroneId, format_units, to_units

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ["time", "drone", "cause", "amount_mj"]


class EnergyModel(BaseModel):
    """
    Coefficients of the radio model plus housekeeping drains (all in mJ).

    beacon_bytes is the per-tick keep-alive a drone holding the direct GBS link
    sends to the station; 0 disables it.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    e_elec: float = Field(5.0e-5, ge=0, description="mJ per byte, paid on both tx and rx")
    e_amp: float = Field(1.0e-7, ge=0, description="mJ per byte per square meter")
    idle_per_tick: float = Field(0.002, ge=0)
    sense_per_sample: float = Field(0.001, ge=0)
    beacon_bytes: int = Field(256, ge=0, description="bytes per tick on the GBS link")
    critical_fraction: float = Field(0.05, gt=0, lt=1)


class DrainCause(str, Enum):
    TX = "Tx"
    RX = "Rx"
    IDLE = "Idle"
    SENSE = "Sense"


@dataclass(frozen=True)
class DrainRecord:
    time: int
    drone: DroneId
    cause: DrainCause
    amount_units: int

    def __post_init__(self):
        if self.amount_units < 0:
            raise ValueError("Drain amounts are non-negative")


def tx_cost(model: EnergyModel, payload: int, d: float) -> float:
    if payload <= 0:
        raise ValueError(f"Payload must be positive, got {payload}")
    if d < 0:
        raise ValueError(f"Distance must be non-negative, got {d}")
    return payload * (model.e_elec + model.e_amp * d * d)


def beacon_cost(model: EnergyModel, d: float) -> float:
    """Per-tick cost of keeping the GBS link up over distance d (0 when disabled)."""
    if model.beacon_bytes == 0:
        return 0.0
    return tx_cost(model, model.beacon_bytes, d)


def rx_cost(model: EnergyModel, payload: int) -> float:
    if payload <= 0:
        raise ValueError(f"Payload must be positive, got {payload}")
    return payload * model.e_elec


def idle_cost(model: EnergyModel, ticks: int) -> float:
    if ticks < 0:
        raise ValueError(f"Tick count must be non-negative, got {ticks}")
    return ticks * model.idle_per_tick


def sense_cost(model: EnergyModel, samples: int) -> float:
    if samples < 0:
        raise ValueError(f"Sample count must be non-negative, got {samples}")
    return samples * model.sense_per_sample


def is_depleted(battery: Battery, critical_fraction: float) -> bool:
    return battery.level_units <= critical_fraction * battery.capacity_units


def apply_drain(battery: Battery, amount: Union[float, int], critical_fraction: float,
                in_units: bool = False) -> Tuple[Battery, bool]:
    """
    Remove energy from a battery, saturating at zero.

    Args:
        battery: the battery to drain
        amount: energy to remove, in mJ (or accounting units if in_units)
        critical_fraction: fraction of capacity at or below which the drone is depleted
        in_units: treat amount as integer accounting units

    Returns:
        (drained battery, depleted flag)
    """
    units = int(amount) if in_units else to_units(amount)
    if units < 0:
        raise ValueError(f"Drain amount must be non-negative, got {amount}")
    drained = replace(battery, level_units=max(0, battery.level_units - units))
    return drained, is_depleted(drained, critical_fraction)


class Ledger:
    """Append-only record of every drain applied during one run."""

    def __init__(self):
        self.records: List[DrainRecord] = []
        self.total_units = 0

    def __len__(self):
        return len(self.records)

    def record(self, time: int, drone: DroneId, cause: DrainCause, amount_units: int) -> None:
        if amount_units == 0:
            return
        self.records.append(DrainRecord(time, drone, cause, amount_units))
        self.total_units += amount_units

    def per_drone_units(self) -> Dict[DroneId, int]:
        totals: Dict[DroneId, int] = defaultdict(int)
        for rec in self.records:
            totals[rec.drone] += rec.amount_units
        return dict(totals)

    def per_cause_units(self) -> Dict[DrainCause, int]:
        totals: Dict[DrainCause, int] = defaultdict(int)
        for rec in self.records:
            totals[rec.cause] += rec.amount_units
        return dict(totals)

    def rows(self) -> List[Tuple[int, str, str, str]]:
        return [(r.time, str(r.drone), r.cause.value, format_units(r.amount_units)) for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows(), columns=LEDGER_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)
        logger.debug("Wrote %d ledger records to %s", len(self.records), path)
