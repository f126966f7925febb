"""Shared instance factories for the test suite."""

import numpy as np

from race_wfl.cost_model import DeviceProfile


def random_device_profile(rng: np.random.Generator) -> DeviceProfile:
    """Wide-range random device; may be feasible or not for a given gain."""
    return DeviceProfile(
        sample_count=int(rng.integers(10, 300)),
        cycles_per_sample=10 ** rng.uniform(5, 7.5),
        cpu_hz=10 ** rng.uniform(8, 9.5),
        power_coeff=10 ** rng.uniform(-29, -27),
        max_power_w=10 ** rng.uniform(-2, 0.5),
        max_energy_j=10 ** rng.uniform(-3, -0.5),
        model_bits=10 ** rng.uniform(5, 7),
    )


def random_instance(rng: np.random.Generator):
    """(profile, gain, bandwidth) triple over wide ranges."""
    return (random_device_profile(rng),
            10 ** rng.uniform(1, 8),
            10 ** rng.uniform(5, 7))
