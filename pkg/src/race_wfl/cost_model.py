"""Per-device computation/communication costs and the round delay.

Computation time scales inversely with the allocated CPU fraction while
computation energy grows with its square; transmission time is the model
size over the achievable rate and transmission energy is the radiated
power times that time.  The round delay is the longest total delay among
the devices assigned to a sub-channel.
"""

from dataclasses import dataclass

import numpy as np

from .channel import data_rate
from .errors import AssignmentError, RaceError


@dataclass(frozen=True)
class DeviceProfile:
    """Static per-device resources."""

    sample_count: int            # local training samples
    cycles_per_sample: float     # CPU cycles to train one sample
    cpu_hz: float                # available CPU cycles per second
    power_coeff: float           # energy coefficient per cycle^3
    max_power_w: float           # maximum transmit power, W
    max_energy_j: float          # per-round energy budget, J
    model_bits: float            # uplink payload size, bits

    def __post_init__(self):
        if self.sample_count != int(self.sample_count):
            raise ValueError("sample_count must be an integer")
        for name in ("sample_count", "cycles_per_sample", "cpu_hz",
                     "power_coeff", "max_power_w", "max_energy_j",
                     "model_bits"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DeviceProfile.{name} must be > 0")

    @property
    def work_cycles(self) -> float:
        """Total CPU cycles for one local training pass."""
        return self.cycles_per_sample * self.sample_count


@dataclass(frozen=True)
class DeviceCosts:
    comp_time: float
    comp_energy: float
    tx_time: float
    tx_energy: float

    @property
    def total_time(self) -> float:
        return self.comp_time + self.tx_time

    @property
    def total_energy(self) -> float:
        return self.comp_energy + self.tx_energy


def comp_costs(p: DeviceProfile, chi: float) -> tuple[float, float]:
    """(time, energy) of local training at CPU fraction ``chi`` > 0."""
    if chi <= 0:
        raise RaceError("chi = 0 gives infinite computation delay")
    eff_hz = chi * p.cpu_hz
    return p.work_cycles / eff_hz, p.power_coeff * p.work_cycles * eff_hz ** 2


def device_costs(p: DeviceProfile, chi: float, rho: float, gain: float,
                 bandwidth: float) -> DeviceCosts:
    """Full cost breakdown for a selected device.

    ``chi`` and ``rho`` must be strictly positive: a selected device with
    a zero allocation would never finish its round.
    """
    if rho <= 0:
        raise RaceError("rho = 0 gives zero rate and infinite delay")
    comp_time, comp_energy = comp_costs(p, chi)
    rate = data_rate(bandwidth, rho, p.max_power_w, gain)
    if rate <= 0:
        raise RaceError("zero data rate: transmission never completes")
    tx_time = p.model_bits / rate
    tx_energy = rho * p.max_power_w * tx_time
    return DeviceCosts(comp_time, comp_energy, tx_time, tx_energy)


def validate_assignment(assignment: np.ndarray) -> None:
    """Check the K x N sub-channel assignment matrix.

    Entries must be 0/1, each sub-channel row selects at most one device
    (idle rows are allowed when too few devices are eligible), and each
    device is assigned to at most one sub-channel.
    """
    a = np.asarray(assignment)
    if a.ndim != 2:
        raise AssignmentError("assignment must be a K x N matrix")
    if not np.isin(a, (0, 1)).all():
        raise AssignmentError("assignment entries must be 0 or 1")
    if np.any(a.sum(axis=1) > 1):
        raise AssignmentError("a sub-channel was assigned several devices")
    if np.any(a.sum(axis=0) > 1):
        raise AssignmentError("a device was assigned several sub-channels")


def round_delay(assignment: np.ndarray, delays: np.ndarray) -> float:
    """Longest total delay among assigned devices; 0 with no assignments."""
    validate_assignment(assignment)
    a = np.asarray(assignment)
    delays = np.asarray(delays, dtype=np.float64)
    if a.shape[1] != delays.shape[0]:
        raise AssignmentError("assignment and delay vector disagree on N")
    assigned = a.sum(axis=0).astype(bool)
    if not assigned.any():
        return 0.0
    return float(delays[assigned].max())
