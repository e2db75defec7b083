"""Decentralized priority coordination of platoons inside the zone.

Conflicts are resolved on the zone's cell grid: for every pair of crossing
movements the cells both bodies sweep form a shared region, and a platoon
pair approaching the same region must agree on a crossing order.  Pairs are
classified every step: free when nobody contests the region, blocked when a
rival occupies or has committed to it, coordinated when both sides are close
enough that the decision can no longer wait.  A coordinated group picks one
joint priority permutation (a 24-way action head shared across group sizes),
holds it until everyone crossed, and scores the episode by how long the
crossing took.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .drl.agent import Experience
from .dynamics import VehicleParams, step_vehicle
from .geometry import Grid, IntersectionLayout, msd, oriented_rect, rect_cells

K_MAX = 4
N_PRIORITY_ACTIONS = math.factorial(K_MAX)
PERMS = tuple(permutations(range(K_MAX)))  # lexicographic, 24 entries

INDEPENDENT_FREE = 1
INDEPENDENT_BLOCKED = 2
COORDINATED = 3

# stop this far short of a contested region's first cell
BAR_MARGIN = 0.05


class SafetyFault(RuntimeError):
    """A platoon can no longer stop before cells it has not been granted."""


@dataclass(frozen=True)
class StatusLabel:
    pid: int
    label: int            # one of the three scenario codes above
    group: int | None = None  # coordination group id when label == COORDINATED


# -- static conflict-region precomputation ------------------------------------


def path_cell_spans(movement, grid: Grid, params: VehicleParams,
                    march: float = 0.05) -> dict:
    """For one vehicle riding a movement: cell -> (s_first, s_last).

    s is the front-bumper arc length; the pair brackets every arc at which
    part of the body covers that zone cell.  Vehicles track the lane
    reference curve, so the body is the path tube of the vehicle's width:
    a front bumper at arc s covers tube arcs [s - length, s].  A rigid
    rectangle pivoted at the bumper heading would instead swing its tail
    across neighbouring lanes on the tight turns.  Platoon members reuse
    the map at their own offset arcs, so this is the single rasterization
    the tracker ever needs.
    """
    tube: dict[tuple[int, int], list[float]] = {}
    half = grid.zone_side / 2.0
    lo_arc, hi_arc = -params.length, movement.length + params.length
    n = int(math.ceil((hi_arc - lo_arc) / march))
    for i in range(n):
        tau = lo_arc + i * march
        seg = min(march, hi_arc - tau)
        x, y, heading = movement.pose(tau + 0.5 * seg)
        rect = oriented_rect(x, y, seg, params.width, heading)
        for cell in rect_cells(rect, -half, -half, grid.cell_size,
                               grid.granularity, grid.granularity):
            if cell in tube:
                tube[cell][1] = tau + seg
            else:
                tube[cell] = [tau, tau + seg]
    return {cell: (lo, hi + params.length) for cell, (lo, hi) in tube.items()}


@dataclass(frozen=True)
class SharedRegion:
    """Zone cells contested by a pair of movements, with entry/clear arcs.

    enter/clear are front-bumper arcs of a single body: the body first touches
    a shared cell at `enter` and has left them all beyond `clear`.  A platoon
    tail adds its rigid offset to the clear arc.
    """

    cells: frozenset
    enter_a: float
    clear_a: float
    enter_b: float
    clear_b: float

    def enter(self, first: bool) -> float:
        return self.enter_a if first else self.enter_b

    def clear(self, first: bool) -> float:
        return self.clear_a if first else self.clear_b


def build_regions(layout: IntersectionLayout, grid: Grid,
                  params: VehicleParams, march: float = 0.05,
                  spans: dict | None = None) -> dict:
    """Shared regions for every movement pair that contests at least one cell."""
    if spans is None:
        spans = {m.key: path_cell_spans(m, grid, params, march)
                 for m in layout.movements}
    regions = {}
    keys = sorted(spans)
    for i, ka in enumerate(keys):
        for kb in keys[i + 1:]:
            shared = spans[ka].keys() & spans[kb].keys()
            if not shared:
                continue
            regions[(ka, kb)] = SharedRegion(
                cells=frozenset(shared),
                enter_a=min(spans[ka][c][0] for c in shared),
                clear_a=max(spans[ka][c][1] for c in shared),
                enter_b=min(spans[kb][c][0] for c in shared),
                clear_b=max(spans[kb][c][1] for c in shared))
    return regions


# -- priority actions ----------------------------------------------------------


def enumerate_priority_actions(k: int) -> list:
    """All k! crossing orders, lexicographic by member rank."""
    if not 2 <= k <= K_MAX:
        raise ValueError(f"conflict sets hold 2..{K_MAX} platoons, got {k}")
    return list(permutations(range(k)))

def valid_action_mask(k: int) -> np.ndarray:
    """Which of the 24 fixed-head permutations apply to a k-platoon group.

    A permutation is valid when it leaves every position beyond k untouched,
    so exactly k! actions survive and their prefixes enumerate the k-orders.
    """
    if not 2 <= k <= K_MAX:
        raise ValueError(f"conflict sets hold 2..{K_MAX} platoons, got {k}")
    return np.array([all(p[i] == i for i in range(k, K_MAX)) for p in PERMS])


def order_from_action(action: int, members: list) -> list:
    """Priority order (highest first) encoded by one 24-way action."""
    perm = PERMS[action]
    k = len(members)
    if any(perm[i] != i for i in range(k, K_MAX)):
        raise ValueError(f"action {action} is invalid for a group of {k}")
    return [members[perm[i]] for i in range(k)]


# -- state encoding ------------------------------------------------------------


def encode_coordination_state(g: int, group: list, others: list,
                              v_max: float) -> np.ndarray:
    """Four g x g channels: member cells, member speeds, desired cells, others.

    `group` lists, in canonical rank order, dicts with current/desired cell
    sets and a speed; cell codes are the 1-based rank, and desired cells
    wanted by more than one member carry the contested code k+1 instead.
    """
    state = np.zeros((4, g, g))
    k = len(group)
    want = {}
    for rank, info in enumerate(group, start=1):
        for r, c in info["current"]:
            state[0, r, c] = rank
            state[1, r, c] = info["speed"] / v_max
        for cell in info["desired"]:
            want[cell] = rank if cell not in want else k + 1
    for (r, c), code in want.items():
        state[2, r, c] = code
    for cells in others:
        for r, c in cells:
            state[3, r, c] = 1.0
    return state


def coordination_reward(coordination_time: float, travel_times) -> float:
    """Negative cost of one coordination: time-to-clear plus mean transit."""
    if coordination_time < 0:
        raise ValueError("coordination time cannot be negative")
    if len(travel_times) == 0:
        raise ValueError("need at least one travel time")
    if any(pc < 0 for pc in travel_times):
        raise ValueError("travel times cannot be negative")
    k = len(travel_times)
    return -(coordination_time + float(np.sum(travel_times)) / k)


# -- the per-step tracker -------------------------------------------------------


@dataclass(frozen=True)
class PlatoonView:
    """What the tracker needs to know about one platoon in or near the zone."""

    pid: int
    movement: str
    front: float   # lead front-bumper arc from the stop line
    speed: float
    size: int


@dataclass
class CoordinationRecord:
    """Completed coordination: the scalar outcome plus replay-ready experiences."""

    group: int
    members: list
    coordination_time: float
    travel_times: list
    reward: float
    experiences: list


@dataclass
class ZonePlan:
    """Per-step tracker output the simulation acts on."""

    labels: dict
    bars: dict       # pid -> stop-before arc (None when unconstrained)
    blocking: dict   # pid -> set of pids it is stopped behind
    completed: list  # CoordinationRecord finished this step
    triggered: list  # group ids created this step


@dataclass
class _Group:
    gid: int
    members: list          # canonical order (sorted by movement key)
    order: list            # pids, highest priority first
    state: np.ndarray
    action: int
    mask: np.ndarray
    t0: float
    role_done: dict        # pid -> time it cleared all its in-group regions
    exited: dict           # pid -> time its tail left the zone
    next_state: dict = field(default_factory=dict)  # pid -> follow-on state
    next_mask: dict = field(default_factory=dict)


class CoordinationTracker:
    """Stateful scanner, decision broker, and bookkeeper for zone platoons.

    The simulation calls step() once per tick with every released platoon
    still interacting with the zone; `decide_fn(state, mask, members)` is
    invoked synchronously whenever a new conflict group must pick an order.
    """

    def __init__(self, layout: IntersectionLayout, grid: Grid,
                 params: VehicleParams, dt: float, k_max: int = K_MAX,
                 spans: dict | None = None, regions: dict | None = None):
        if k_max != K_MAX:
            raise ValueError("the fixed action head supports exactly 4 slots")
        self.layout = layout
        self.grid = grid
        self.params = params
        self.dt = dt
        # spans and regions are immutable once built; episodes share them
        self.spans = spans if spans is not None else {
            m.key: path_cell_spans(m, grid, params) for m in layout.movements}
        self.regions = (regions if regions is not None
                        else build_regions(layout, grid, params, spans=self.spans))
        self._region_of = {}
        for (ka, kb), region in self.regions.items():
            self._region_of[(ka, kb)] = (region, True)
            self._region_of[(kb, ka)] = (region, False)
        self._groups: dict[int, _Group] = {}
        self._active_groups: dict[int, set] = {}
        self._last_group: dict[int, int] = {}
        self._suppressed: dict[tuple[int, int], int] = {}
        self._next_gid = 0

    # -- small per-platoon helpers -----------------------------------------

    def _pitch(self) -> float:
        return self.params.length + self.params.headway_platoon

    def _tail_offset(self, view: PlatoonView) -> float:
        return (view.size - 1) * self._pitch()

    def _zone_clear_arc(self, view: PlatoonView) -> float:
        move = self.layout.movement(view.movement)
        return move.length + self._tail_offset(view) + self.params.length

    def _region(self, mov_a: str, mov_b: str):
        return self._region_of.get((mov_a, mov_b))

    def _passed(self, view: PlatoonView, region: SharedRegion, first: bool) -> bool:
        return view.front > region.clear(first) + self._tail_offset(view)

    def _occupies(self, view: PlatoonView, region: SharedRegion, first: bool) -> bool:
        return (region.enter(first) <= view.front
                <= region.clear(first) + self._tail_offset(view))

    def _committed(self, view: PlatoonView, region: SharedRegion, first: bool) -> bool:
        """Cannot stop before the region's first cell any more."""
        bar = region.enter(first) - BAR_MARGIN
        return view.front + msd(view.speed, self.params.a_max) > bar + 1e-9

    def _in_envelope(self, view: PlatoonView, region: SharedRegion, first: bool) -> bool:
        """One free-intent step from now, stopping before the region fails.

        This is the last step at which a crossing order can still be imposed,
        so it is the coordination trigger; for a symmetric pair it fires at
        the pair's minimum stopping distance.
        """
        v2, d = step_vehicle(view.speed, self.params.a_max, self.dt,
                             self.params.v_max)
        reach = view.front + d + msd(v2, self.params.a_max)
        return reach > region.enter(first) - BAR_MARGIN

    def _member_arcs(self, view: PlatoonView):
        pitch = self._pitch()
        return [view.front - i * pitch for i in range(view.size)]

    def _current_cells(self, view: PlatoonView) -> set:
        spans = self.spans[view.movement]
        arcs = self._member_arcs(view)
        return {cell for cell, (lo, hi) in spans.items()
                if any(lo <= s <= hi for s in arcs)}

    def _desired_cells(self, view: PlatoonView) -> set:
        """Cells the platoon still wants: its remaining path beyond the front.

        Two crossing platoons touch the same cells at different times, so a
        one-step projection would make their wishes look disjoint; the
        contested "conflict grids" are exactly where remaining paths meet.
        """
        spans = self.spans[view.movement]
        return {cell for cell, (lo, hi) in spans.items() if lo > view.front}

    # -- the scan ------------------------------------------------------------

    def step(self, views: list, t: float, decide_fn) -> ZonePlan:
        by_pid = {}
        movements = set()
        for view in views:
            if view.movement in movements:
                raise ValueError(f"two platoons of movement {view.movement} "
                                 "in the zone violates the one-per-movement rule")
            movements.add(view.movement)
            by_pid[view.pid] = view

        completed = self._update_groups(by_pid, t)

        bars: dict[int, float | None] = {v.pid: None for v in views}
        blocking: dict[int, set] = {v.pid: set() for v in views}
        edges = []

        pids = sorted(by_pid)
        for i, pa in enumerate(pids):
            for pb in pids[i + 1:]:
                self._classify_pair(by_pid[pa], by_pid[pb], bars, blocking, edges)

        triggered = self._form_groups(by_pid, edges, bars, blocking, t, decide_fn)
        self._group_bars(by_pid, bars, blocking)
        self._check_safety(by_pid, bars, t)

        labels = {}
        for pid, view in by_pid.items():
            gids = self._active_groups.get(pid)
            if gids:
                labels[pid] = StatusLabel(pid, COORDINATED, min(gids))
            elif bars[pid] is not None:
                labels[pid] = StatusLabel(pid, INDEPENDENT_BLOCKED)
            else:
                labels[pid] = StatusLabel(pid, INDEPENDENT_FREE)
        return ZonePlan(labels=labels, bars=bars, blocking=blocking,
                        completed=completed, triggered=triggered)

    # -- scan internals -------------------------------------------------------

    def _update_groups(self, by_pid: dict, t: float) -> list:
        completed = []
        for gid, group in list(self._groups.items()):
            for pid in group.members:
                view = by_pid.get(pid)
                if pid not in group.exited:
                    if view is None:
                        group.exited[pid] = t  # removed from the network early
                    elif view.front >= self._zone_clear_arc(view):
                        group.exited[pid] = t
                if pid not in group.role_done and self._role_complete(group, pid, by_pid):
                    group.role_done[pid] = t
                    self._active_groups.get(pid, set()).discard(gid)
            if len(group.exited) == len(group.members):
                completed.append(self._finish_group(group, t))
                del self._groups[gid]
                self._suppressed = {pair: g for pair, g in self._suppressed.items()
                                    if g != gid}
        return completed

    def _role_complete(self, group: _Group, pid: int, by_pid: dict) -> bool:
        view = by_pid.get(pid)
        if view is None:
            return True
        for other in group.members:
            if other == pid or other not in by_pid:
                continue
            hit = self._region(view.movement, by_pid[other].movement)
            if hit is None:
                continue
            region, first = hit
            if not self._passed(view, region, first):
                return False
        return True

    def _finish_group(self, group: _Group, t: float) -> CoordinationRecord:
        role_times = [group.role_done.get(pid, group.exited[pid])
                      for pid in group.members]
        ct = max(role_times) - group.t0
        pcs = [group.exited[pid] - group.t0 for pid in group.members]
        reward = coordination_reward(ct, pcs)
        experiences = []
        for pid in group.members:
            nxt = group.next_state.get(pid)
            experiences.append(Experience(
                state=group.state, action=group.action, reward=reward,
                next_state=nxt, terminal=nxt is None,
                next_mask=group.next_mask.get(pid)))
            if self._last_group.get(pid) == group.gid:
                del self._last_group[pid]
        return CoordinationRecord(group=group.gid, members=list(group.members),
                                  coordination_time=ct, travel_times=pcs,
                                  reward=reward, experiences=experiences)

    def _classify_pair(self, va: PlatoonView, vb: PlatoonView,
                       bars: dict, blocking: dict, edges: list):
        hit = self._region(va.movement, vb.movement)
        if hit is None:
            return
        region, a_first = hit
        if self._passed(va, region, a_first) or self._passed(vb, region, not a_first):
            return
        if self._cogrouped(va.pid, vb.pid):
            return  # ranked; handled by _group_bars
        if self._suppression_bar(va, vb, region, a_first, bars, blocking):
            return

        a_holds = self._committed(va, region, a_first)
        b_holds = self._committed(vb, region, not a_first)
        if a_holds and not b_holds:
            self._bar_before(vb, region, not a_first, bars)
            blocking[vb.pid].add(va.pid)
            return
        if b_holds and not a_holds:
            self._bar_before(va, region, a_first, bars)
            blocking[va.pid].add(vb.pid)
            return
        if a_holds and b_holds:
            raise SafetyFault(
                f"platoons {va.pid} and {vb.pid} both hold region "
                f"{sorted(region.cells)[:4]}...; coordination was decided too late")

        if (self._in_envelope(va, region, a_first)
                and self._in_envelope(vb, region, not a_first)):
            edges.append((va.pid, vb.pid))

    def _cogrouped(self, pa: int, pb: int) -> bool:
        return any(pa in g.members and pb in g.members
                   for g in self._groups.values())

    def _suppression_bar(self, va: PlatoonView, vb: PlatoonView,
                         region: SharedRegion, a_first: bool,
                         bars: dict, blocking: dict) -> bool:
        """Spectators squeezed out of a crowded conflict set keep waiting
        until that set has crossed; without this they would edge with its
        members one step later and defeat the group-size cap."""
        for spect, member in ((va, vb), (vb, va)):
            gid = self._suppressed.get((spect.pid, member.pid))
            if gid is None:
                continue
            group = self._groups.get(gid)
            if group is None or len(group.role_done) == len(group.members):
                continue
            first = a_first if spect is va else not a_first
            self._bar_before(spect, region, first, bars)
            blocking[spect.pid].add(member.pid)
            return True
        return False

    def _bar_before(self, view: PlatoonView, region: SharedRegion,
                    first: bool, bars: dict):
        bar = region.enter(first) - BAR_MARGIN
        if bars[view.pid] is None or bar < bars[view.pid]:
            bars[view.pid] = bar

    def _form_groups(self, by_pid: dict, edges: list, bars: dict,
                     blocking: dict, t: float, decide_fn) -> list:
        if not edges:
            return []
        adjacency: dict[int, set] = {}
        for a, b in edges:
            adjacency.setdefault(a, set()).add(b)
            adjacency.setdefault(b, set()).add(a)
        seen: set[int] = set()
        triggered = []
        for root in sorted(adjacency):
            if root in seen:
                continue
            component, stack = [], [root]
            while stack:
                node = stack.pop()
                if node in seen:
                    continue
                seen.add(node)
                component.append(node)
                stack.extend(adjacency[node] - seen)
            group_pids, spectators = self._cap_component(component, by_pid)
            group_pids, dropped = self._drop_cogrouped(group_pids)
            spectators = spectators + dropped
            if len(group_pids) < 2:
                continue
            gid = self._open_group(group_pids, by_pid, t, decide_fn)
            for pid in spectators:
                # left out of a crowded conflict set: wait like a blocked platoon
                self._spectator_bar(pid, gid, group_pids, by_pid, bars, blocking)
            triggered.append(gid)
        return triggered

    def _drop_cogrouped(self, group_pids: list):
        """Two platoons already ranked against each other must not be ranked
        again by a second decision; contradictory orders would wedge both."""
        dropped = []
        kept: list[int] = []
        for pid in group_pids:
            if any(self._cogrouped(pid, other) for other in kept):
                dropped.append(pid)
            else:
                kept.append(pid)
        return kept, dropped

    def _cap_component(self, component: list, by_pid: dict):
        if len(component) <= K_MAX:
            return sorted(component, key=lambda p: by_pid[p].movement), []
        def nearest_gap(pid):
            view = by_pid[pid]
            gaps = []
            for other in component:
                if other == pid:
                    continue
                hit = self._region(view.movement, by_pid[other].movement)
                if hit is not None:
                    region, first = hit
                    gaps.append(region.enter(first) - view.front)
            return min(gaps)
        ranked = sorted(component, key=lambda p: (nearest_gap(p), by_pid[p].movement))
        chosen = ranked[:K_MAX]
        return (sorted(chosen, key=lambda p: by_pid[p].movement),
                [p for p in component if p not in chosen])

    def _spectator_bar(self, pid: int, gid: int, group_pids: list, by_pid: dict,
                       bars: dict, blocking: dict):
        view = by_pid[pid]
        for other in group_pids:
            hit = self._region(view.movement, by_pid[other].movement)
            if hit is None:
                continue
            region, first = hit
            if self._passed(view, region, first):
                continue
            if self._committed(view, region, first):
                # cannot stop before this region any more; the pair stays under
                # normal classification, which makes the group member defer
                continue
            self._bar_before(view, region, first, bars)
            blocking[pid].add(other)
            self._suppressed[(pid, other)] = gid

    def _open_group(self, members: list, by_pid: dict, t: float, decide_fn) -> int:
        k = len(members)
        group_infos = []
        for pid in members:
            view = by_pid[pid]
            group_infos.append({"current": self._current_cells(view),
                                "desired": self._desired_cells(view),
                                "speed": view.speed})
        others = [self._current_cells(view) for pid, view in sorted(by_pid.items())
                  if pid not in members]
        state = encode_coordination_state(self.grid.granularity, group_infos,
                                          others, self.params.v_max)
        mask = valid_action_mask(k)
        action = int(decide_fn(state, mask, list(members)))
        if not mask[action]:
            raise ValueError(f"decision {action} is masked for a group of {k}")
        order = order_from_action(action, members)

        gid = self._next_gid
        self._next_gid += 1
        group = _Group(gid=gid, members=list(members), order=order, state=state,
                       action=action, mask=mask, t0=t, role_done={}, exited={})
        self._groups[gid] = group
        for pid in members:
            # a fresh trigger is the follow-on state of this platoon's previous
            # coordination, which is still waiting for its last member to exit
            prev_gid = self._last_group.get(pid)
            if prev_gid is not None and prev_gid in self._groups and prev_gid != gid:
                self._groups[prev_gid].next_state[pid] = state
                self._groups[prev_gid].next_mask[pid] = mask
            self._active_groups.setdefault(pid, set()).add(gid)
            self._last_group[pid] = gid
        return gid

    def _group_bars(self, by_pid: dict, bars: dict, blocking: dict):
        for gid, group in self._groups.items():
            order = group.order
            for rank, pid in enumerate(order):
                view = by_pid.get(pid)
                if view is None or pid in group.role_done:
                    continue
                for higher in order[:rank]:
                    other = by_pid.get(higher)
                    if other is None:
                        continue
                    hit = self._region(view.movement, other.movement)
                    if hit is None:
                        continue
                    region, first = hit
                    rival_region, rival_first = self._region(other.movement,
                                                             view.movement)
                    if (self._passed(view, region, first)
                            or self._passed(other, rival_region, rival_first)):
                        continue
                    if self._committed(view, region, first):
                        # the ranked-below platoon can no longer stop before
                        # this region (the pair never edged, so the decision
                        # did not vet it); physics outranks the chosen order
                        # and the higher-ranked platoon waits instead
                        if self._committed(other, rival_region, rival_first):
                            raise SafetyFault(
                                f"platoons {view.pid} and {other.pid} are both "
                                "committed to a shared region; coordination "
                                "was decided too late")
                        self._bar_before(other, rival_region, rival_first, bars)
                        blocking[other.pid].add(view.pid)
                    else:
                        self._bar_before(view, region, first, bars)
                        blocking[view.pid].add(higher)

    def _check_safety(self, by_pid: dict, bars: dict, t: float):
        for pid, bar in bars.items():
            if bar is None:
                continue
            view = by_pid[pid]
            need = msd(view.speed, self.params.a_max)
            room = bar - view.front
            if room < need - 1e-6:
                raise SafetyFault(
                    f"t={t}: platoon {pid} ({view.movement}) needs {need:.2f} m "
                    f"to stop but has {room:.2f} m before a contested region")
