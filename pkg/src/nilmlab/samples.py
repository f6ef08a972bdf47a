"""Shared record types for meter readings."""
from __future__ import annotations

import math
from dataclasses import dataclass

NOMINAL_VOLTAGE = 230.0
POWER_FACTOR = 0.95


@dataclass(frozen=True)
class PowerSample:
    t_ms: int
    active_w: float
    reactive_var: float
    voltage_v: float
    current_a: float
    energy_wh: float

    @classmethod
    def from_active(cls, t_ms: int, active_w: float, energy_wh: float = 0.0,
                    voltage_v: float = NOMINAL_VOLTAGE, power_factor: float = POWER_FACTOR):
        """Derive reactive power and current from active power at a fixed power factor."""
        reactive = active_w * math.tan(math.acos(power_factor))
        apparent = math.hypot(active_w, reactive)
        return cls(t_ms, active_w, reactive, voltage_v, apparent / voltage_v, energy_wh)


@dataclass(frozen=True)
class Gap:
    """Half-open interval [t_start_ms, t_end_ms) with no samples."""

    t_start_ms: int
    t_end_ms: int

    @property
    def duration_ms(self) -> int:
        return self.t_end_ms - self.t_start_ms
