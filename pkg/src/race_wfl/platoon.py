"""Longitudinal platoon dynamics with a car-following acceleration law.

The platoon is a leader (index 0) plus ``N`` followers moving along a
line.  Each follower accelerates according to the intelligent-driver-style
law: free-road acceleration shaped by speed relative to the desired speed,
minus a braking term driven by the ratio of the dynamic safe distance to
the actual gap.  The leader tracks a configurable piecewise-constant speed
profile with its acceleration clipped to the same physical limits.

Speeds are clamped at zero: if a vehicle would cross zero speed within a
step it stops at its stopping point instead of moving backwards.  A
non-positive gap is a simulation fault (collision), never silently
clamped.
"""

from dataclasses import dataclass

import numpy as np

from .accel import maybe_jit
from .errors import CollisionError


@dataclass(frozen=True)
class IdmParams:
    """Car-following parameters. All values strictly positive."""

    a_max: float = 0.73        # maximum acceleration, m/s^2
    b_max: float = 1.67        # maximum comfortable deceleration, m/s^2
    d_min: float = 2.0         # minimum inter-vehicle space, m
    t_min: float = 1.5         # minimum reaction time, s
    v_des: float = 30.0        # desired velocity, m/s
    sensitivity_exponent: float = 4.0   # driver sensitivity, in [1, 5]
    update_interval: float = 1.0        # integration step tau, s
    substeps: int = 10         # Euler sub-steps per update interval

    def __post_init__(self):
        for name in ("a_max", "b_max", "d_min", "t_min", "v_des",
                     "sensitivity_exponent", "update_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be > 0")
        if not 1.0 <= self.sensitivity_exponent <= 5.0:
            raise ValueError("sensitivity_exponent must lie in [1, 5]")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


@dataclass(frozen=True)
class VehicleKinematics:
    """Single-vehicle snapshot: position, speed, acceleration, length."""

    position: float
    speed: float
    acceleration: float
    length: float


@dataclass
class PlatoonState:
    """Kinematics of the leader (index 0) and N followers, front to back."""

    positions: np.ndarray
    speeds: np.ndarray
    accelerations: np.ndarray
    lengths: np.ndarray

    @property
    def n_followers(self) -> int:
        return len(self.positions) - 1

    def gaps(self) -> np.ndarray:
        """Bumper-to-bumper gap of each follower to its predecessor."""
        return (self.positions[:-1] - self.positions[1:] - self.lengths[:-1])

    def distances_to_leader(self) -> np.ndarray:
        """Center distance of each follower to the leader."""
        return self.positions[0] - self.positions[1:]

    def vehicle(self, n: int) -> VehicleKinematics:
        return VehicleKinematics(
            position=float(self.positions[n]),
            speed=float(self.speeds[n]),
            acceleration=float(self.accelerations[n]),
            length=float(self.lengths[n]),
        )

    def copy(self) -> "PlatoonState":
        return PlatoonState(
            self.positions.copy(), self.speeds.copy(),
            self.accelerations.copy(), self.lengths.copy(),
        )


def safe_distance(v: float, dv: float, p: IdmParams) -> float:
    """Dynamic safe distance for a vehicle at speed ``v`` closing at ``dv``."""
    return p.d_min + p.t_min * v + v * dv / (2.0 * np.sqrt(p.a_max * p.b_max))


def idm_acceleration(v: float, dv: float, dx: float, p: IdmParams) -> float:
    """Follower acceleration given speed, closing speed, and gap ``dx`` > 0."""
    if dx <= 0.0:
        raise CollisionError(f"non-positive gap {dx!r}")
    h = safe_distance(v, dv, p)
    return p.a_max * (
        1.0 - (v / p.v_des) ** p.sensitivity_exponent - (h / dx) ** 2
    )


@maybe_jit
def _step_kernel(x, v, acc, lengths, a_max, b_max, d_min, t_min, v_des,
                 delta, tau, substeps, leader_target):
    """One update interval in place, integrated in ``substeps`` Euler
    sub-steps.  Returns the index of the first vehicle with a non-positive
    gap (before or during the step), else 0.  ``acc`` receives the
    acceleration applied over each sub-step (last sub-step on exit)."""
    n = x.shape[0]
    dt = tau / substeps
    inv_2ab = 1.0 / (2.0 * np.sqrt(a_max * b_max))
    for _ in range(substeps):
        lead_acc = (leader_target - v[0]) / dt
        if lead_acc > a_max:
            lead_acc = a_max
        elif lead_acc < -b_max:
            lead_acc = -b_max
        acc[0] = lead_acc
        for i in range(1, n):
            dx = x[i - 1] - x[i] - lengths[i - 1]
            if dx <= 0.0:
                return i
            dv = v[i] - v[i - 1]
            h = d_min + t_min * v[i] + v[i] * dv * inv_2ab
            acc[i] = a_max * (1.0 - (v[i] / v_des) ** delta
                              - (h / dx) ** 2)
        for i in range(n):
            vi = v[i]
            ai = acc[i]
            v_new = vi + ai * dt
            if v_new < 0.0:
                # stops within the sub-step; advance to the stopping point
                disp = -0.5 * vi * vi / ai
                v_new = 0.0
                acc[i] = 0.0
            else:
                disp = vi * dt + 0.5 * ai * dt * dt
            x[i] += disp
            v[i] = v_new
        for i in range(1, n):
            if x[i - 1] - x[i] - lengths[i - 1] <= 0.0:
                return i
    return 0


@maybe_jit
def _integrate_kernel(x, v, acc_out, lengths, a_max, b_max, d_min, t_min,
                      v_des, delta, tau, substeps, leader_targets,
                      traj_x, traj_v):
    """Integrate ``len(leader_targets)`` update intervals, recording
    trajectories.  Returns the 1-based step number at which a collision
    occurred, or 0.  Row 0 of ``traj_x``/``traj_v`` holds the initial
    state."""
    n = x.shape[0]
    steps = leader_targets.shape[0]
    for j in range(n):
        traj_x[0, j] = x[j]
        traj_v[0, j] = v[j]
    for s in range(steps):
        bad = _step_kernel(x, v, acc_out, lengths, a_max, b_max, d_min,
                           t_min, v_des, delta, tau, substeps,
                           leader_targets[s])
        if bad > 0:
            return s + 1
        for j in range(n):
            traj_x[s + 1, j] = x[j]
            traj_v[s + 1, j] = v[j]
    return 0


def step_platoon(state: PlatoonState, p: IdmParams,
                 leader_target: float | None = None) -> PlatoonState:
    """Advance the platoon by one update interval.

    The leader accelerates toward ``leader_target`` (its current speed if
    None) within [-b_max, a_max]; followers follow the car-following law.
    Raises CollisionError if any gap is non-positive before or after the
    step.
    """
    out = state.copy()
    if leader_target is None:
        leader_target = float(state.speeds[0])
    bad = _step_kernel(
        out.positions, out.speeds, out.accelerations, out.lengths,
        p.a_max, p.b_max, p.d_min, p.t_min, p.v_des,
        p.sensitivity_exponent, p.update_interval, p.substeps,
        leader_target,
    )
    if bad > 0:
        raise CollisionError(
            f"vehicle {bad} closed the gap to its predecessor"
        )
    return out


def simulate_platoon(state: PlatoonState, p: IdmParams, n_steps: int,
                     leader_targets: np.ndarray | float | None = None):
    """Run ``n_steps`` updates; returns (positions, speeds) trajectories
    of shape (n_steps + 1, n). Raises CollisionError on a fault."""
    if leader_targets is None:
        leader_targets = float(state.speeds[0])
    if np.isscalar(leader_targets):
        leader_targets = np.full(n_steps, float(leader_targets))
    leader_targets = np.asarray(leader_targets, dtype=np.float64)
    if leader_targets.shape != (n_steps,):
        raise ValueError("leader_targets must have one entry per step")
    x = state.positions.copy()
    v = state.speeds.copy()
    acc = np.empty_like(x)
    traj_x = np.empty((n_steps + 1, len(x)))
    traj_v = np.empty_like(traj_x)
    bad = _integrate_kernel(
        x, v, acc, state.lengths, p.a_max, p.b_max, p.d_min, p.t_min,
        p.v_des, p.sensitivity_exponent, p.update_interval, p.substeps,
        leader_targets, traj_x, traj_v,
    )
    if bad > 0:
        raise CollisionError(f"collision at step {bad}")
    return traj_x, traj_v


def init_platoon(n_followers: int, rng: np.random.Generator,
                 speed_range=(15.0, 20.0), gap_range=(10.0, 15.0),
                 vehicle_length: float = 5.0,
                 leader_speed: float | None = None) -> PlatoonState:
    """Random initial platoon: speeds and bumper gaps drawn uniformly."""
    n = n_followers + 1
    speeds = rng.uniform(*speed_range, size=n)
    if leader_speed is not None:
        speeds[0] = leader_speed
    gaps = rng.uniform(*gap_range, size=n_followers)
    lengths = np.full(n, vehicle_length)
    positions = np.empty(n)
    positions[0] = 0.0
    for i in range(1, n):
        positions[i] = positions[i - 1] - lengths[i - 1] - gaps[i - 1]
    return PlatoonState(
        positions=positions,
        speeds=speeds,
        accelerations=np.zeros(n),
        lengths=lengths,
    )
