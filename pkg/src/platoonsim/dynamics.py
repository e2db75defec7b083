"""Vehicle kinematics, safe-gap control, and platoon formation mechanics.

Vehicles are point-mass bodies moving along one-dimensional routes (the
formation lane, the zone path, and the exit lane of their movement, joined
end to end).  `route_pos` is the front-bumper arc length along that route;
0 is the upstream end of the formation zone and `formation_length` is the
stop line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import heading_vector, msd, oriented_rect


@dataclass(frozen=True)
class VehicleParams:
    """Shared physical limits and headways (identical for every CAV)."""

    length: float = 5.0           # l_c
    width: float = 1.8            # w_c
    a_max: float = 5.0            # symmetric accel/decel limit
    v_max: float = 20.0
    headway_platoon: float = 1.0  # desired gap inside a platoon
    headway_lane: float = 1.5     # minimum gap outside platoons

    def __post_init__(self):
        if self.a_max <= 0 or self.v_max <= 0:
            raise ValueError("acceleration and speed limits must be positive")
        if not 0 < self.headway_platoon <= self.headway_lane:
            raise ValueError("need 0 < platoon headway <= lane headway")


def step_vehicle(speed: float, accel: float, dt: float, v_max: float) -> tuple[float, float]:
    """One constant-acceleration step: (new_speed, distance_travelled).

    Exact piecewise integration: braking clamps at the stop event instead of
    integrating the speed through zero, and acceleration clamps at v_max.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    v0 = speed
    if accel < 0 and v0 + accel * dt <= 0:
        t_stop = v0 / -accel
        return 0.0, v0 * t_stop + 0.5 * accel * t_stop * t_stop
    if accel > 0 and v0 + accel * dt >= v_max:
        t_cap = max(0.0, (v_max - v0) / accel)
        d = v0 * t_cap + 0.5 * accel * t_cap * t_cap + v_max * (dt - t_cap)
        return v_max, d
    return v0 + accel * dt, v0 * dt + 0.5 * accel * dt * dt


def max_safe_accel(budget: float, speed: float, a_max: float, dt: float) -> float:
    """Largest acceleration that keeps this step plus a full stop within budget.

    Chooses max a in [-a_max, a_max] with  d(a) + msd(v') <= budget, where
    d(a) is this step's travel and v' the end-of-step speed.  Under full
    braking d + msd(v') equals msd(v) exactly, so a vehicle that currently
    satisfies msd(v) <= budget can always maintain the invariant.
    """
    if budget < 0:
        return -a_max
    if budget == 0:
        # standstill at the boundary is a fixed point; any motion must brake
        return 0.0 if speed == 0 else -a_max
    c = dt
    # quadratic alpha*a^2 + beta*a + gamma = budget on the no-mid-stop branch
    alpha = c * c / (2 * a_max)
    beta = 0.5 * c * c + speed * c / a_max
    gamma = speed * c + speed * speed / (2 * a_max)
    disc = beta * beta - 4 * alpha * (gamma - budget)
    if disc >= 0:
        root = (-beta + math.sqrt(disc)) / (2 * alpha)
        if root >= -speed / c - 1e-12:
            return float(np.clip(root, -a_max, a_max))
    # must stop within the step: travel is v^2 / (2|a|)
    if speed <= 0:
        return -a_max
    need = speed * speed / (2 * budget)
    return float(np.clip(-need, -a_max, -0.0))


def follow_gap_accel(gap: float, speed: float, leader_speed: float,
                     min_gap: float, params: VehicleParams, dt: float) -> float:
    """Acceleration for a follower that must never close below min_gap.

    Worst case assumed: the leader may brake at a_max from now on, so the
    follower's step plus stopping distance must fit within
    gap - min_gap + leader stopping distance.  Panic-brakes if the gap is
    already below min_gap; accelerates toward v_max when the gap is ample.
    """
    if gap < min_gap:
        return -params.a_max
    budget = gap - min_gap + msd(leader_speed, params.a_max)
    a = max_safe_accel(budget, speed, params.a_max, dt)
    if speed >= params.v_max:
        a = min(a, 0.0)
    return a


def stop_bar_accel(distance: float, speed: float, params: VehicleParams,
                   dt: float) -> float:
    """Acceleration limit so the front bumper never crosses a bar `distance` ahead.

    distance == 0 is not overshoot: a vehicle parked exactly on the bar
    commands 0, not -a_max, so followers fed its commanded acceleration do
    not inherit phantom braking.
    """
    if distance < 0:
        return -params.a_max
    a = max_safe_accel(distance, speed, params.a_max, dt)
    if speed >= params.v_max:
        a = min(a, 0.0)
    return a


def free_accel(speed: float, params: VehicleParams) -> float:
    """Unconstrained intent: full throttle until the speed limit."""
    return params.a_max if speed < params.v_max else 0.0


def project_desired_location(x: float, y: float, heading: float, speed: float,
                             accel: float, dt: float) -> tuple[float, float]:
    """Straight-line projection of a pose one interval ahead.

    x' = x + v*sin(h)*dt + a*sin(h)*dt^2/2, y' likewise with cos(h); the
    heading is held constant over the interval, which is exact on straights
    and a tangent approximation on arcs.
    """
    d = speed * dt + 0.5 * accel * dt * dt
    return x + d * math.sin(heading), y + d * math.cos(heading)


def formation_accel(gap: float, speed: float, leader_speed: float,
                    leader_accel: float, params: VehicleParams, dt: float,
                    k_gap: float = 0.25, k_speed: float = 0.9) -> float:
    """Closing controller for a platoon member converging on its predecessor.

    Feedforward of the predecessor's commanded acceleration (decided earlier
    in the same step and shared over V2V) plus proportional terms in gap
    error and speed difference.  The safety envelope assumes synchronized
    braking rather than the independent worst case of follow_gap_accel,
    which would forbid gaps below the predecessor's stopping distance and
    make platooning at speed impossible: this step's travel plus the
    follower's stopping distance must fit within
    gap - d_h + (predecessor's announced travel) + msd(predecessor's
    end-of-step speed).  Since full braking minimizes travel + msd, the
    envelope is preserved step over step and the gap never closes below
    d_h while the follower is the faster vehicle.
    """
    d_h = params.headway_platoon
    lead_v2, lead_d = step_vehicle(leader_speed, leader_accel, dt, params.v_max)
    a = leader_accel + k_gap * (gap - d_h) + k_speed * (leader_speed - speed)
    safe = max_safe_accel(gap - d_h + lead_d + msd(lead_v2, params.a_max),
                          speed, params.a_max, dt)
    a = min(a, safe)
    if speed >= params.v_max:
        a = min(a, 0.0)
    return float(np.clip(a, -params.a_max, params.a_max))


def platoon_length(n: int, params: VehicleParams) -> float:
    """Bumper-to-bumper length of an n-vehicle platoon at formation headway."""
    if n < 1:
        raise ValueError("platoon needs at least one vehicle")
    return n * params.length + (n - 1) * params.headway_platoon


def max_platoon_size(params: VehicleParams, formation_length: float) -> int:
    """Largest n whose formed platoon fits inside the formation zone."""
    n = int((formation_length + params.headway_platoon)
            // (params.length + params.headway_platoon))
    return max(1, n)


@dataclass
class Vehicle:
    """One CAV and its per-episode bookkeeping."""

    vid: int
    movement: str
    arrival_time: float          # Poisson event time (may precede spawn)
    spawn_time: float
    route_pos: float             # front bumper arc along the route
    speed: float
    accel: float = 0.0
    platoon_id: int | None = None
    wait_time: float = 0.0       # accumulated standstill time before stop line
    speed_sum: float = 0.0
    step_count: int = 0
    fuel_total: float = 0.0
    exit_time: float | None = None
    removed_by_deadlock: bool = False

    @property
    def exited(self) -> bool:
        return self.exit_time is not None


@dataclass
class Platoon:
    """An ordered group of vehicles in one movement, led by its first member."""

    pid: int
    movement: str
    target_size: int
    members: list[int] = field(default_factory=list)  # vehicle ids, front first
    formed: bool = False
    released: bool = False
    decision_time: float | None = None
    release_time: float | None = None

    @property
    def size(self) -> int:
        return len(self.members)


def rigid_offsets(n: int, params: VehicleParams) -> list[float]:
    """Front-bumper offsets of members behind the leader in a formed platoon."""
    pitch = params.length + params.headway_platoon
    return [i * pitch for i in range(n)]


def platoon_footprint(poses, params: VehicleParams) -> list[np.ndarray]:
    """Body rectangles for member poses [(x, y, heading), ...].

    Each pose is the front bumper; the body rectangle is centred half a
    vehicle length behind it along the heading.
    """
    rects = []
    for x, y, heading in poses:
        f = heading_vector(heading)
        cx = x - 0.5 * params.length * f[0]
        cy = y - 0.5 * params.length * f[1]
        rects.append(oriented_rect(cx, cy, params.length, params.width, heading))
    return rects
