import numpy as np
import pytest
from hypothesis import given, strategies as st

from race_wfl.cost_model import (
    DeviceProfile, device_costs, round_delay, validate_assignment,
)
from race_wfl.errors import AssignmentError, RaceError

PROFILE = DeviceProfile(
    sample_count=1, cycles_per_sample=1e7, cpu_hz=0.5e9, power_coeff=1e-28,
    max_power_w=10 ** (15 / 10) / 1000, max_energy_j=0.1, model_bits=1e6,
)


def test_comp_time_table_values():
    # mu = 1e7 cycles, one sample, 0.5 GHz fully allocated -> 20 ms
    c = device_costs(PROFILE, 1.0, 1.0, 1e3, 1e6)
    assert c.comp_time == pytest.approx(0.02, rel=0, abs=0)


def test_chi_scaling_laws_exact():
    chi = 0.25
    a = device_costs(PROFILE, chi, 1.0, 1e3, 1e6)
    b = device_costs(PROFILE, 2 * chi, 1.0, 1e3, 1e6)
    assert b.comp_time == 0.5 * a.comp_time
    assert b.comp_energy == 4.0 * a.comp_energy


def test_tx_costs_arithmetic_oracle():
    # 1 Mbit at 5 Mbit/s with rho*P = 10 mW -> 0.2 s and 2 mJ
    prof = DeviceProfile(
        sample_count=1, cycles_per_sample=1e7, cpu_hz=0.5e9,
        power_coeff=1e-28, max_power_w=0.1, max_energy_j=0.1,
        model_bits=1e6,
    )
    rho = 0.1
    gain = (2 ** 5 - 1) / (rho * prof.max_power_w)  # rate = 5 Mbit/s at B = 1 MHz
    c = device_costs(prof, 1.0, rho, gain, 1e6)
    assert c.tx_time == pytest.approx(0.2, rel=1e-12)
    assert c.tx_energy == pytest.approx(2e-3, rel=1e-12)


def test_energy_and_time_identities():
    c = device_costs(PROFILE, 0.7, 0.4, 2e3, 1e6)
    assert c.total_energy == c.comp_energy + c.tx_energy
    assert c.total_time == c.comp_time + c.tx_time


def test_zero_allocations_error():
    with pytest.raises(RaceError):
        device_costs(PROFILE, 0.0, 1.0, 1e3, 1e6)
    with pytest.raises(RaceError):
        device_costs(PROFILE, 1.0, 0.0, 1e3, 1e6)
    with pytest.raises(RaceError):
        device_costs(PROFILE, 1.0, 1.0, 0.0, 1e6)  # zero gain, zero rate


def _assignment(k, n, pairs):
    a = np.zeros((k, n), dtype=int)
    for row, col in pairs:
        a[row, col] = 1
    return a


def test_round_delay_single_device():
    a = _assignment(1, 4, [(0, 2)])
    delays = np.array([0.0, 0.0, 0.3, 0.0])
    assert round_delay(a, delays) == 0.3


def test_round_delay_is_max():
    a = _assignment(3, 5, [(0, 0), (1, 2), (2, 4)])
    delays = np.array([0.1, 9.9, 0.5, 9.9, 0.2])
    assert round_delay(a, delays) == 0.5


def test_round_delay_empty_assignment_is_zero():
    a = np.zeros((3, 5), dtype=int)
    assert round_delay(a, np.full(5, 7.0)) == 0.0


def test_round_delay_brute_force_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n, k = 20, 6
        devices = rng.choice(n, size=k, replace=False)
        a = _assignment(k, n, list(enumerate(devices)))
        delays = rng.uniform(0.01, 2.0, size=n)
        expected = max(delays[d] for d in devices)  # exhaustive over assigned
        assert round_delay(a, delays) == expected


def test_round_delay_invariant_under_subchannel_permutation():
    rng = np.random.default_rng(4)
    a = _assignment(4, 8, [(0, 1), (1, 3), (2, 5), (3, 7)])
    delays = rng.uniform(0.0, 1.0, size=8)
    base = round_delay(a, delays)
    for _ in range(10):
        perm = rng.permutation(4)
        assert round_delay(a[perm], delays) == base


def test_assignment_validation_errors():
    with pytest.raises(AssignmentError):
        validate_assignment(np.array([[0, 2], [0, 0]]))
    with pytest.raises(AssignmentError):  # two devices on one sub-channel
        validate_assignment(np.array([[1, 1], [0, 0]]))
    with pytest.raises(AssignmentError):  # one device on two sub-channels
        validate_assignment(np.array([[1, 0], [1, 0]]))
    with pytest.raises(AssignmentError):
        round_delay(np.array([[1, 0]]), np.array([0.1, 0.2, 0.3]))


@given(st.integers(0, 6))
def test_profile_validation(bad_field):
    fields = dict(
        sample_count=10, cycles_per_sample=1e7, cpu_hz=1e9,
        power_coeff=1e-28, max_power_w=0.1, max_energy_j=0.1,
        model_bits=1e6,
    )
    name = list(fields)[bad_field]
    fields[name] = 0
    with pytest.raises(ValueError):
        DeviceProfile(**fields)
