"""Episode engine: arrivals, platoon formation, zone coordination, deadlock
handling, baseline drivers, per-step safety auditing, and measurement.

One Simulation object runs one episode.  Heavy geometry products (cell
spans, shared regions, the state canvas) are built once per process in a
SharedContext and reused across episodes; everything mutable lives on the
Simulation so episodes are independent given their seeds.

Step order, repeated T/dt times:
  arrivals -> entry requests -> platoon-size decisions -> formation
  bookkeeping and releases -> zone status scan with priority decisions ->
  deadlock pass -> per-vehicle control and integration -> exits, rewards,
  and the safety audit.

Vehicle routes are one-dimensional: route_pos is the front-bumper arc with
0 at the formation-zone entry, L at the stop line, and L + zone path length
at the start of the exit lane.  The coordination tracker works in zone
coordinates (arc from the stop line), so views translate by -L.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .baselines import (FIXED_PLATOON_SIZE, ReservationManager, WebsterPlan,
                        random_priority_decider)
from .config import SimConfig
from .coordination import CoordinationTracker, PlatoonView, build_regions, path_cell_spans
from .deadlock import build_wait_graph, detect_deadlocks, punish_and_clear
from .drl.agent import Experience
from .dynamics import (Platoon, Vehicle, follow_gap_accel, formation_accel,
                       free_accel, rigid_offsets, step_vehicle, stop_bar_accel)
from .formation import (CanvasVehicle, FormationCanvas, delay_factor,
                        formation_reward, penalized_wait, time_to_join)
from .geometry import Grid, msd
from .metrics import EpisodeMetrics
from .traffic import ArrivalProcess, emit_request

AUDIT_GRANULARITY = 24   # safety audit always runs at the finest grid
STANDSTILL = 0.1         # m/s; below this a vehicle accrues waiting time
FCFS_REQUEST_RANGE = 50.0  # m before the stop line where crossing requests start
GAP_TOLERANCE = 0.1      # m; formation gaps within d_h +- this count as formed

PLATOON_POLICIES = ("coor-plt", "fp", "rc")


class SafetyAuditError(RuntimeError):
    """Two vehicles shared a cell or overlapped in lane; the dump names them."""

    def __init__(self, message: str, dump_path):
        super().__init__(message)
        self.dump_path = dump_path


# -- shared, episode-independent products ------------------------------------

@dataclass(frozen=True)
class SharedContext:
    layout: object
    params: object
    grid: Grid
    spans: dict            # movement key -> {cell: (lo, hi)} at config granularity
    regions: dict
    audit: dict            # movement key -> (cell ids, lo array, hi array) at g=24
    canvas: FormationCanvas
    zone_len: dict         # movement key -> zone path length
    movements: tuple       # movement keys, sorted


_SHARED_CACHE: dict = {}


def shared_context(config: SimConfig) -> SharedContext:
    key = (config.g, config.l_c, config.w_c, config.l_lane, config.S, config.L,
           config.a_max, config.v_max, config.d_h, config.d_h_hat, config.T_m)
    hit = _SHARED_CACHE.get(key)
    if hit is not None:
        return hit
    layout = config.layout()
    params = config.vehicle_params()
    grid = Grid(config.g)
    spans = {m.key: path_cell_spans(m, grid, params) for m in layout.movements}
    regions = build_regions(layout, grid, params, spans=spans)
    audit_grid = Grid(AUDIT_GRANULARITY)
    audit = {}
    for m in layout.movements:
        cells = path_cell_spans(m, audit_grid, params)
        items = sorted(cells.items())
        ids = np.array([r * AUDIT_GRANULARITY + c for (r, c), _ in items], dtype=np.int64)
        lo = np.array([bracket[0] for _, bracket in items])
        hi = np.array([bracket[1] for _, bracket in items])
        audit[m.key] = (ids, lo, hi)
    ctx = SharedContext(
        layout=layout, params=params, grid=grid, spans=spans, regions=regions,
        audit=audit, canvas=FormationCanvas(layout, params, horizon=config.T_m),
        zone_len={m.key: m.length for m in layout.movements},
        movements=tuple(sorted(m.key for m in layout.movements)))
    _SHARED_CACHE[key] = ctx
    return ctx


# -- per-episode bookkeeping --------------------------------------------------

@dataclass
class _Window:
    """One platoon-size action and its reward accounting.

    Factors accrue for every vehicle present in the lane's formation zone
    between the decision and the platoon's full exit from the network; the
    reward is computed at that exit.  next_state is the canvas at the
    lane's next sizing decision, which normally precedes the exit.
    """

    pid: int
    movement: str
    state: object
    action: int
    t_decision: float
    acc: dict = field(default_factory=dict)  # vid -> [wait, speed_sum, steps, fuel]
    next_state: object = None
    has_next: bool = False
    reward: float | None = None
    emitted: bool = False
    punished: bool = False


@dataclass
class _Lane:
    movement: str
    queue: list = field(default_factory=list)      # active vehicles, front first
    backlog: deque = field(default_factory=deque)  # arrived, waiting for road room
    forming: Platoon | None = None
    released: Platoon | None = None
    windows: list = field(default_factory=list)    # accruing windows, oldest first
    last_window: _Window | None = None             # awaiting its next_state


class Simulation:
    """One episode under one policy; see the module docstring for the loop."""

    def __init__(self, config: SimConfig, *, policy: str | None = None,
                 seed: int | None = None, layer1=None, layer2=None,
                 normalizer=None, training: bool = False,
                 calibrating: bool = False, shared: SharedContext | None = None,
                 trace_path=None, audit_dump_dir="."):
        self.config = config
        self.policy = policy if policy is not None else config.policy
        if self.policy not in PLATOON_POLICIES + ("webster", "fcfs-reservation"):
            raise ValueError(f"unknown policy {self.policy!r}")
        self.seed = int(seed if seed is not None else config.seed)
        self.shared = shared if shared is not None else shared_context(config)
        self.params = self.shared.params
        self.fuel = config.fuel_model()
        self.dt = config.dt
        self.L = config.L
        self.layer1, self.layer2 = layer1, layer2
        self.normalizer = normalizer
        self.training = training
        self.calibrating = calibrating
        self.audit_dump_dir = audit_dump_dir

        arrivals_child, policy_child = np.random.SeedSequence(self.seed).spawn(2)
        self.arrivals = ArrivalProcess(config.schedule(), config.dt,
                                       [int(x) for x in arrivals_child.generate_state(4)])
        self.policy_rng = np.random.default_rng(policy_child)

        self.platoon_mode = self.policy in PLATOON_POLICIES
        self.tracker = None
        self.webster = None
        self.reservation = None
        self._random_priority = random_priority_decider(self.policy_rng)
        if self.platoon_mode:
            self.tracker = CoordinationTracker(
                self.shared.layout, self.shared.grid, self.params, config.dt,
                spans=self.shared.spans, regions=self.shared.regions)
            if self.policy in ("coor-plt", "fp") and not calibrating \
                    and self.layer2 is None:
                raise ValueError(f"policy {self.policy!r} needs a priority agent")
            if self.policy in ("coor-plt", "rc") and not calibrating \
                    and self.layer1 is None:
                raise ValueError(f"policy {self.policy!r} needs a sizing agent")
        elif self.policy == "webster":
            self.webster = WebsterPlan(webster_rates(config))
        else:
            self.reservation = ReservationManager(
                self.shared.layout, self.shared.grid, self.params, config.dt,
                spans=self.shared.spans)
        # sizing windows exist wherever the sizing reward is defined
        self.windows_enabled = self.platoon_mode and self.policy != "fp"

        self.lanes = {mk: _Lane(mk) for mk in self.shared.movements}
        self.vehicles: dict[int, Vehicle] = {}
        self.platoons: dict[int, Platoon] = {}
        self.window_of: dict[int, _Window] = {}
        self.granted: set = set()
        self.emitted_requests: set = set()
        self._next_vid = 0
        self._next_pid = 0
        self._plan = None
        self._travel_times: list = []
        self._fuel_exited: list = []
        self._step_fuel: dict = {}
        self.metrics = EpisodeMetrics(seed=self.seed, policy=self.policy,
                                      condition=config.condition, g=config.g)
        self._trace = open(trace_path, "w", encoding="utf-8") if trace_path else None

    # -- top level ------------------------------------------------------------

    def run(self) -> EpisodeMetrics:
        n_steps = int(round(self.config.T / self.dt))
        try:
            for i in range(n_steps):
                self._step(i)
        finally:
            if self._trace:
                self._trace.close()
        self._finalize(n_steps)
        return self.metrics

    def _step(self, i: int) -> None:
        t = i * self.dt
        self._spawn_arrivals(t)
        if self.platoon_mode:
            self._sizing_decisions(t)
            self._releases(t)
            self._plan = self.tracker.step(self._views(), t, self._decide_priority)
            self._consume_records(self._plan)
            self._deadlock_pass(t, self._plan)
        elif self.reservation is not None:
            self._fcfs_requests(i)
        commands = self._accelerations(t)
        self._integrate(commands)
        self._accrue_windows()
        self._exits_and_rewards(t)
        self._audit(i, t)
        if self._trace:
            self._write_trace(t)
        self.metrics.steps = i + 1

    # -- arrivals ---------------------------------------------------------------

    def _spawn_arrivals(self, t: float) -> None:
        counts = self.arrivals.sample(t)
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            for _ in range(counts.get(mk, 0)):
                vid = self._next_vid
                self._next_vid += 1
                veh = Vehicle(vid=vid, movement=mk, arrival_time=t,
                              spawn_time=t, route_pos=0.0, speed=0.0)
                lane.backlog.append(veh)
                self.metrics.arrived += 1
            self._drain_backlog(lane, t)

    def _drain_backlog(self, lane: _Lane, t: float) -> None:
        p = self.params
        spawn_front = p.length  # body just inside the formation zone
        while lane.backlog:
            if lane.queue:
                tail = lane.queue[-1]
                gap = tail.route_pos - p.length - spawn_front
                if gap < p.headway_lane:
                    return
                # entry speed that stays stoppable within the available gap
                budget = gap - p.headway_lane + msd(tail.speed, p.a_max)
                speed = min(p.v_max, math.sqrt(max(0.0, 2.0 * p.a_max * budget)))
            else:
                speed = p.v_max
            veh = lane.backlog.popleft()
            veh.spawn_time = t
            veh.route_pos = spawn_front
            veh.speed = speed
            lane.queue.append(veh)
            self.vehicles[veh.vid] = veh
            self.metrics.spawned += 1
            emit_request(veh, p, self.emitted_requests)

    # -- layer 1: sizing decisions and formation ---------------------------------

    def _canvas_vehicles(self) -> list:
        out = []
        p = self.params
        pitch = p.length + p.headway_platoon
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            move = self.shared.layout.movement(mk)
            forming = lane.forming
            tail_slot = None
            if forming is not None and forming.members:
                tail_slot = self.vehicles[forming.members[-1]].route_pos - pitch
            for veh in lane.queue:
                x, y, heading = move.pose(veh.route_pos - self.L)
                if veh.platoon_id is None and tail_slot is not None:
                    ttj = time_to_join(tail_slot - veh.route_pos, veh.speed, p)
                else:
                    ttj = 0.0
                out.append(CanvasVehicle(x, y, heading, veh.speed, ttj))
        return out

    def _sizing_decisions(self, t: float) -> None:
        pending = [mk for mk in self.shared.movements
                   if self.lanes[mk].forming is None
                   and any(v.platoon_id is None for v in self.lanes[mk].queue)]
        if not pending:
            return
        snapshot = self._canvas_vehicles()
        for mk in pending:
            lane = self.lanes[mk]
            state = self.shared.canvas.encode(snapshot, mk)
            if lane.last_window is not None and not lane.last_window.has_next:
                lane.last_window.next_state = state
                lane.last_window.has_next = True
                self._maybe_emit(lane.last_window, terminal=False)
            size = self._choose_size(state)
            pid = self._next_pid
            self._next_pid += 1
            platoon = Platoon(pid=pid, movement=mk, target_size=size,
                              decision_time=t)
            for veh in lane.queue:
                if len(platoon.members) >= size:
                    break
                if veh.platoon_id is None:
                    veh.platoon_id = pid
                    platoon.members.append(veh.vid)
            lane.forming = platoon
            self.platoons[pid] = platoon
            hist = self.metrics.size_histogram
            hist[size] = hist.get(size, 0) + 1
            self.metrics.layer1_actions += 1
            if self.windows_enabled:
                window = _Window(pid, mk, state, size - 1, t)
                lane.windows.append(window)
                lane.last_window = window
                self.window_of[pid] = window

    def _choose_size(self, state) -> int:
        if self.policy == "fp":
            return FIXED_PLATOON_SIZE
        if self.calibrating or (self.policy == "rc" and self.layer1 is None):
            return int(self.policy_rng.integers(1, self.config.n_sizes() + 1))
        action = self.layer1.act(state, greedy=not self.training)
        return action + 1

    def _join_new_members(self, lane: _Lane) -> None:
        platoon = lane.forming
        if platoon is None or platoon.size >= platoon.target_size:
            return
        for veh in lane.queue:
            if platoon.size >= platoon.target_size:
                break
            if veh.platoon_id is None:
                veh.platoon_id = platoon.pid
                platoon.members.append(veh.vid)

    def _converged_prefix(self, platoon: Platoon) -> int:
        """Member count of the leading run with gaps at d_h within tolerance."""
        p = self.params
        n = 1
        for prev_vid, vid in zip(platoon.members, platoon.members[1:]):
            gap = (self.vehicles[prev_vid].route_pos - p.length
                   - self.vehicles[vid].route_pos)
            if abs(gap - p.headway_platoon) > GAP_TOLERANCE:
                break
            n += 1
        return n

    def _releases(self, t: float) -> None:
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            self._join_new_members(lane)
            platoon = lane.forming
            if platoon is None or not platoon.members:
                continue
            head = self.vehicles[platoon.members[0]]
            size_reached = platoon.size >= platoon.target_size
            overdue = head.wait_time > self.config.T_m
            if not (size_reached or overdue):
                continue
            prefix = self._converged_prefix(platoon)
            if size_reached and prefix < platoon.size and not overdue:
                continue  # commanded size present but still closing gaps
            if lane.released is not None:
                continue  # a platoon of this movement is still in the zone
            # overdue escape departs with whatever leading run has formed
            for vid in platoon.members[prefix:]:
                self.vehicles[vid].platoon_id = None
            platoon.members = platoon.members[:prefix]
            lead = self.vehicles[platoon.members[0]]
            for off, vid in zip(rigid_offsets(platoon.size, self.params),
                                platoon.members):
                veh = self.vehicles[vid]
                veh.route_pos = lead.route_pos - off
                veh.speed = lead.speed
            platoon.formed = True
            platoon.released = True
            platoon.release_time = t
            lane.released = platoon
            lane.forming = None

    # -- layer 2: zone coordination ----------------------------------------------

    def _lead_vehicle(self, platoon: Platoon) -> Vehicle | None:
        """Front-most member still in the network."""
        for vid in platoon.members:
            veh = self.vehicles[vid]
            if not veh.exited:
                return veh
        return None

    def _views(self) -> list:
        views = []
        for mk in self.shared.movements:
            platoon = self.lanes[mk].released
            if platoon is not None:
                lead = self._lead_vehicle(platoon)
                if lead is None:
                    continue
                views.append(PlatoonView(platoon.pid, mk,
                                         lead.route_pos - self.L,
                                         lead.speed, platoon.size))
        return views

    def _decide_priority(self, state, mask, members) -> int:
        if self.layer2 is not None and not self.calibrating:
            return self.layer2.act(state, mask, greedy=not self.training)
        return self._random_priority(state, mask, members)

    def _consume_records(self, plan) -> None:
        self.metrics.coordinations += len(plan.triggered)
        for record in plan.completed:
            self.metrics.layer2_reward += record.reward
            if self.training and self.layer2 is not None:
                for exp in record.experiences:
                    self.layer2.remember(exp)

    # -- deadlock pass -------------------------------------------------------------

    def _platoon_speed(self, pid: int) -> float:
        lead = self._lead_vehicle(self.platoons[pid])
        return lead.speed if lead is not None else float("inf")

    def _origin_experience(self, pid: int):
        window = self.window_of.get(pid)
        if window is None:
            return None
        return Experience(state=window.state, action=window.action, reward=0.0,
                          next_state=window.next_state if window.has_next else None,
                          terminal=not window.has_next)

    def _deadlock_pass(self, t: float, plan) -> None:
        stationary = {pid: blockers for pid, blockers in plan.blocking.items()
                      if blockers and self._platoon_speed(pid) < STANDSTILL}
        if not stationary:
            return
        cycles = detect_deadlocks(build_wait_graph(stationary))
        if not cycles:
            return
        origins = {pid: self._origin_experience(pid)
                   for cycle in cycles for pid in cycle}
        self._removal_time = t
        agent = self.layer1 if self.training else None
        events = punish_and_clear(cycles, origins, agent, self._remove_platoon,
                                  reward=self.config.R_deadlock)
        self.metrics.deadlock_events += len(events)
        for event in events:
            self.metrics.layer1_reward += self.config.R_deadlock * len(event.punished)

    def _remove_platoon(self, pid: int) -> None:
        """Evict a wedged platoon: vehicles leave at the zone boundary, tagged."""
        platoon = self.platoons[pid]
        lane = self.lanes[platoon.movement]
        t = self._removal_time
        for vid in platoon.members:
            veh = self.vehicles[vid]
            if veh.exited:
                continue
            veh.exit_time = t
            veh.removed_by_deadlock = True
            self._travel_times.append(veh.exit_time - veh.spawn_time)
            self._fuel_exited.append(veh.fuel_total)
            self.metrics.exited += 1
            self.metrics.deadlock_removed += 1
        member_set = set(platoon.members)
        lane.queue = [v for v in lane.queue if v.vid not in member_set]
        if lane.released is platoon:
            lane.released = None
        window = self.window_of.pop(pid, None)
        if window is not None:
            window.punished = True
            lane.windows = [w for w in lane.windows if w is not window]

    # -- FCFS requests ----------------------------------------------------------

    def _fcfs_requests(self, i: int) -> None:
        requests = []
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            if not lane.queue:
                continue
            head = lane.queue[0]
            front = head.route_pos - self.L
            if head.vid not in self.granted and front >= -FCFS_REQUEST_RANGE:
                requests.append((head.vid, mk, front, head.speed))
        if requests:
            for vid, profile in self.reservation.step(requests, i).items():
                if profile is not None:
                    self.granted.add(vid)
        self.reservation.prune(i)

    # -- control and integration --------------------------------------------------

    def _must_hold(self, veh: Vehicle, t: float) -> bool:
        """Stop-line gate for vehicles outside released platoons."""
        # the stop envelope parks the front bumper exactly on the bar, so
        # only a strict crossing counts as being inside the zone
        if veh.route_pos >= self.L + 1e-9:
            return False
        if self.platoon_mode:
            return True  # only released platoons may cross
        if self.webster is not None:
            if self.webster.go(veh.movement, t):
                return False
            # Committed crossers caught by the red genuinely unable to stop
            # continue through (the lost time absorbs them).  The tolerance
            # keeps vehicles riding the stop envelope, where msd equals the
            # remaining distance up to float error, on the holding side.
            return (msd(veh.speed, self.params.a_max)
                    <= self.L - veh.route_pos + 1e-6)
        return veh.vid not in self.granted

    def _accelerations(self, t: float) -> dict:
        p, dt = self.params, self.dt
        bars = self._plan.bars if self._plan is not None else {}
        commands: dict[int, float] = {}
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            prev = None
            led: set[int] = set()
            for veh in lane.queue:
                platoon = (self.platoons.get(veh.platoon_id)
                           if veh.platoon_id is not None else None)
                if platoon is not None and platoon.released:
                    # front-most member still in the lane leads; the nominal
                    # head may already have crossed the exit threshold
                    if platoon.pid in led:
                        prev = veh   # rigid follower, integrated with its leader
                        continue
                    led.add(platoon.pid)
                a = free_accel(veh.speed, p)
                if prev is not None:
                    gap = prev.route_pos - p.length - veh.route_pos
                    if platoon is not None and not platoon.released \
                            and veh.vid != platoon.members[0]:
                        a = formation_accel(gap, veh.speed, prev.speed,
                                            commands[prev.vid], p, dt)
                    else:
                        a = min(a, follow_gap_accel(gap, veh.speed, prev.speed,
                                                    p.headway_lane, p, dt))
                if platoon is not None and platoon.released:
                    bar = bars.get(platoon.pid)
                    if bar is not None:
                        a = min(a, stop_bar_accel(self.L + bar - veh.route_pos,
                                                  veh.speed, p, dt))
                elif self._must_hold(veh, t):
                    a = min(a, stop_bar_accel(self.L - veh.route_pos,
                                              veh.speed, p, dt))
                commands[veh.vid] = a
                prev = veh
        return commands

    def _integrate(self, commands: dict) -> None:
        p, dt = self.params, self.dt
        self._step_fuel = {}
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            lead_motion = {}  # pid -> (new_speed, distance, accel)
            for veh in lane.queue:
                platoon = (self.platoons.get(veh.platoon_id)
                           if veh.platoon_id is not None else None)
                rigid = (platoon is not None and platoon.released
                         and platoon.pid in lead_motion)
                if rigid:
                    new_speed, dist, a = lead_motion[platoon.pid]
                else:
                    a = commands[veh.vid]
                    new_speed, dist = step_vehicle(veh.speed, a, dt, p.v_max)
                    if platoon is not None and platoon.released:
                        lead_motion[platoon.pid] = (new_speed, dist, a)
                burn = self.fuel.increment(veh.speed, a, dt)
                veh.fuel_total += burn
                self._step_fuel[veh.vid] = burn
                veh.accel = a
                veh.speed = new_speed
                veh.route_pos += dist
                veh.speed_sum += new_speed
                veh.step_count += 1
                # a bumper parked exactly on the bar is still waiting to enter
                if new_speed < STANDSTILL and veh.route_pos < self.L + 1e-9:
                    veh.wait_time += dt

    # -- window accrual, exits, rewards --------------------------------------------

    def _accrue_windows(self) -> None:
        if not self.windows_enabled:
            return
        dt = self.dt
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            if not lane.windows:
                continue
            forming = [v for v in lane.queue if v.route_pos < self.L + 1e-9]
            for window in lane.windows:
                for veh in forming:
                    acc = window.acc.get(veh.vid)
                    if acc is None:
                        acc = window.acc[veh.vid] = [0.0, 0.0, 0, 0.0]
                    if veh.speed < STANDSTILL:
                        acc[0] += dt
                    acc[1] += veh.speed
                    acc[2] += 1
                    acc[3] += self._step_fuel[veh.vid]

    def _maybe_emit(self, window: _Window, terminal: bool) -> None:
        if window.emitted or window.punished or window.reward is None:
            return
        if not window.has_next and not terminal:
            return
        window.emitted = True
        if self.training and self.layer1 is not None:
            self.layer1.remember(Experience(
                state=window.state, action=window.action, reward=window.reward,
                next_state=window.next_state if window.has_next else None,
                terminal=not window.has_next))

    def _raw_factors(self, window: _Window) -> list:
        """(penalized wait, delay, fuel) per vehicle seen by this window."""
        cfg = self.config
        out = []
        for wait, speed_sum, steps, fuel in window.acc.values():
            mean_speed = speed_sum / steps if steps else 0.0
            out.append((penalized_wait(wait, cfg.T_m),
                        delay_factor(mean_speed, cfg.v_max), fuel))
        return out

    def _close_windows(self, closing: list) -> None:
        """Reward windows whose platoons fully left the network this step.

        All the sizing actions rewarded at one timestamp receive the same
        value, computed over the union of their vehicle sets; lanes closing
        alone reduce to their own set.
        """
        factors = []
        for window in closing:
            factors.extend(self._raw_factors(window))
        if self.calibrating:
            for pw, delay, fuel in factors:
                self.normalizer.observe("wait", pw)
                self.normalizer.observe("delay", delay)
                self.normalizer.observe("fuel", fuel)
            reward = 0.0
        elif factors and self.normalizer is not None:
            cfg = self.config
            reward = formation_reward(
                [self.normalizer.normalize("wait", pw) for pw, _, _ in factors],
                [self.normalizer.normalize("delay", d) for _, d, _ in factors],
                [self.normalizer.normalize("fuel", f) for _, _, f in factors],
                weights=(cfg.w1, cfg.w2, cfg.w3))
        else:
            reward = 0.0
        for window in closing:
            window.reward = reward
            self.metrics.layer1_reward += reward
            self._maybe_emit(window, terminal=False)

    def _exits_and_rewards(self, t: float) -> None:
        t_exit = t + self.dt
        closing = []
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            end = self.L + self.shared.zone_len[mk] + self.params.length
            keep = []
            for veh in lane.queue:
                if veh.route_pos > end:
                    veh.exit_time = t_exit
                    self._travel_times.append(t_exit - veh.spawn_time)
                    self._fuel_exited.append(veh.fuel_total)
                    self.metrics.exited += 1
                else:
                    keep.append(veh)
            lane.queue = keep
            platoon = lane.released
            if platoon is not None and all(
                    self.vehicles[vid].exited for vid in platoon.members):
                lane.released = None
                window = self.window_of.pop(platoon.pid, None)
                if window is not None and not window.punished:
                    closing.append(window)
                    lane.windows = [w for w in lane.windows if w is not window]
        if closing:
            self._close_windows(closing)

    # -- safety audit ---------------------------------------------------------------

    def _audit(self, i: int, t: float) -> None:
        owner: dict[int, tuple] = {}
        p = self.params
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            ids, lo, hi = self.shared.audit[mk]
            zone_max = self.shared.zone_len[mk] + p.length + 1.0
            prev = None
            for veh in lane.queue:
                if prev is not None:
                    gap = prev.route_pos - p.length - veh.route_pos
                    if gap < -1e-9:
                        self._audit_failure(i, t, "lane overlap", prev, veh)
                prev = veh
                front = veh.route_pos - self.L
                if front < 0.0 or front > zone_max:
                    continue
                mask = (lo <= front) & (front <= hi)
                for cid in ids[mask]:
                    held = owner.get(int(cid))
                    if held is not None and held[0] != mk:
                        self._audit_failure(i, t, "cell overlap",
                                            self.vehicles[held[1]], veh)
                    owner[int(cid)] = (mk, veh.vid)

    def _audit_failure(self, i: int, t: float, kind: str,
                       veh_a: Vehicle, veh_b: Vehicle) -> None:
        self.metrics.safety_violations += 1
        dump = {
            "seed": self.seed, "step": i, "t": t, "policy": self.policy,
            "g": self.config.g, "kind": kind,
            "vehicles": [
                {"vid": v.vid, "movement": v.movement, "route_pos": v.route_pos,
                 "speed": v.speed, "platoon": v.platoon_id}
                for v in (veh_a, veh_b)],
        }
        path = f"{self.audit_dump_dir}/safety-failure-seed{self.seed}-step{i}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dump, fh, indent=1)
        raise SafetyAuditError(
            f"{kind} between vehicles {veh_a.vid} ({veh_a.movement}) and "
            f"{veh_b.vid} ({veh_b.movement}) at step {i}; dump at {path}", path)

    # -- trace and finalization --------------------------------------------------------

    def _write_trace(self, t: float) -> None:
        bars = {}
        labels = {}
        if self._plan is not None:
            bars = {str(k): v for k, v in self._plan.bars.items()}
            labels = {str(k): int(v) for k, v in self._plan.labels.items()}
        row = {
            "t": t,
            "vehicles": [[v.vid, v.movement, round(v.route_pos, 4),
                          round(v.speed, 4),
                          v.platoon_id if v.platoon_id is not None else -1]
                         for mk in self.shared.movements
                         for v in self.lanes[mk].queue],
            "bars": bars, "labels": labels,
        }
        self._trace.write(json.dumps(row) + "\n")

    def _finalize(self, n_steps: int) -> None:
        m = self.metrics
        # episode cut: windows that never saw their platoon exit emit as
        # terminal when their reward is known, otherwise they are dropped
        for mk in self.shared.movements:
            lane = self.lanes[mk]
            if lane.last_window is not None:
                self._maybe_emit(lane.last_window, terminal=True)
        m.steps = n_steps
        m.in_network = sum(len(self.lanes[mk].queue) for mk in self.shared.movements)
        m.backlog = sum(len(self.lanes[mk].backlog) for mk in self.shared.movements)
        m.mean_travel_time = (float(np.mean(self._travel_times))
                              if self._travel_times else 0.0)
        m.mean_fuel = (float(np.mean(self._fuel_exited))
                       if self._fuel_exited else 0.0)
        m.travel_times = [float(x) for x in self._travel_times]
        m.check_conservation()


def webster_rates(config: SimConfig) -> dict:
    """Design flows for the fixed-time plan under the configured condition.

    Conditions 1 and 2 use their tier directly; the switching condition uses
    the time-weighted mean of the two tiers over the episode.
    """
    schedule = config.schedule()
    if config.condition in (1, 2):
        return schedule.profile_at(0.0).rates
    w = min(max(config.switch_time / config.T, 0.0), 1.0)
    first = schedule.profile_at(0.0).rates
    second = schedule.profile_at(config.T).rates
    return {mk: w * first[mk] + (1.0 - w) * second[mk] for mk in first}


def run_episode(config: SimConfig, policy: str | None = None,
                seed: int | None = None, **kwargs) -> EpisodeMetrics:
    """One episode; deterministic given (config, policy, seed).

    Keyword arguments are forwarded to Simulation (agents, normalizer,
    training/calibrating flags, shared context, trace path).
    """
    return Simulation(config, policy=policy, seed=seed, **kwargs).run()
