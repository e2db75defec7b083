"""Wait-for-graph deadlock detection and punishment.

Inside the coordination zone a platoon can end up stopped because the
cells it needs next are held by another platoon, which is itself stopped
for the same reason.  Writing "u waits on v" as a directed edge, a
deadlock is exactly a cycle: nobody on it can move until someone else
does.  Detection decomposes the graph into strongly connected components
and enumerates the elementary cycles inside each nontrivial component.
Every cycle is one deadlock event: each platoon on it has the platoon-size
decision that created it re-emitted with the deadlock punishment, the
sizing agent takes one immediate gradient step per punished experience,
and the platoon is removed from the zone.

Cycle enumeration is written directly on dict adjacency rather than on a
graph library: the detector is exercised against a brute-force oracle over
every digraph on up to five nodes, and per-call library overhead at that
volume swamps a one-minute budget.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

R_DEADLOCK = -10.0


@dataclass(frozen=True)
class WaitForGraph:
    """Directed wait-for relation among in-zone platoons.

    `succ[u]` holds every v such that u is stopped or braking because v
    occupies or holds priority over cells u needs.  No self-edges.
    """

    nodes: tuple
    succ: dict


@dataclass(frozen=True)
class DeadlockEvent:
    """One resolved cycle: who was on it, who was punished, who removed."""

    cycle: tuple
    punished: tuple
    removed: tuple


def build_wait_graph(blocking: dict) -> WaitForGraph:
    """Normalize a per-step blocking relation into a WaitForGraph.

    `blocking` maps each in-zone platoon id to the set of platoon ids it
    is currently held behind (the zone plan's blocking output).  Targets
    missing from the keys are kept as sink nodes; self-references are
    dropped.
    """
    nodes = set(blocking)
    for waits_on in blocking.values():
        nodes.update(waits_on)
    order = tuple(sorted(nodes))
    succ = {u: tuple(sorted(v for v in blocking.get(u, ()) if v != u))
            for u in order}
    return WaitForGraph(nodes=order, succ=succ)


def _strongly_connected(nodes, succ) -> list:
    # iterative Tarjan; recursion depth is unbounded by caller input
    index: dict = {}
    low: dict = {}
    on_stack: set = set()
    stack: list = []
    comps: list = []
    counter = 0
    for root in nodes:
        if root in index:
            continue
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        work = [(root, iter(succ[root]))]
        while work:
            v, it = work[-1]
            descended = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ.get(w, ()))))
                    descended = True
                    break
                if w in on_stack and index[w] < low[v]:
                    low[v] = index[w]
            if descended:
                continue
            work.pop()
            if work and low[v] < low[work[-1][0]]:
                low[work[-1][0]] = low[v]
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                comps.append(comp)
    return comps


def _cycles_within(comp, succ) -> list:
    """Every elementary cycle whose vertices all lie in `comp`.

    Each cycle is reported exactly once, rotated so its smallest vertex
    leads: the search rooted at s only walks vertices ordered after s, so
    a cycle is found from its minimum vertex and nowhere else.
    """
    members = sorted(comp)
    rank = {v: i for i, v in enumerate(members)}
    cycles = []

    def walk(start, v, path, on_path):
        for w in succ.get(v, ()):
            if w == start:
                cycles.append(tuple(path))
                continue
            r = rank.get(w)
            if r is not None and r > rank[start] and w not in on_path:
                path.append(w)
                on_path.add(w)
                walk(start, w, path, on_path)
                path.pop()
                on_path.discard(w)

    for start in members:
        walk(start, start, [start], {start})
    return cycles


def detect_deadlocks(graph: WaitForGraph) -> list:
    """Every elementary cycle of the wait-for graph.

    Returns cycles as vertex tuples rotated to start at their smallest
    vertex, sorted by length then lexicographically.  Empty exactly when
    the graph is acyclic.  A self-loop counts as a length-1 cycle so the
    detector stays sound on arbitrary digraphs, though build_wait_graph
    never produces one.
    """
    cycles = []
    for comp in _strongly_connected(graph.nodes, graph.succ):
        if len(comp) == 1:
            v = comp[0]
            if v in graph.succ.get(v, ()):
                cycles.append((v,))
            continue
        cycles.extend(_cycles_within(comp, graph.succ))
    cycles.sort(key=lambda c: (len(c), c))
    return cycles


def punish_and_clear(cycles, origins: dict, agent, remove_fn,
                     reward: float = R_DEADLOCK) -> list:
    """Resolve detected deadlocks: punish the sizing decisions, clear the zone.

    For each platoon on each cycle, the platoon-size experience that
    created it (`origins[pid]`) is re-emitted with the punishment reward
    (R_DEADLOCK unless overridden) and pushed to the sizing agent's
    replay, the agent takes one immediate
    gradient step, and `remove_fn(pid)` evicts the platoon's vehicles from
    the zone.  A platoon appearing on several cycles is processed once.
    Platoons without an origin experience (spawned by a non-learning
    policy) or with no agent are removed without a training event.

    Returns one DeadlockEvent per cycle; the episode deadlock counter is
    the number of events.  Removing every on-cycle platoon leaves the
    rebuilt wait-for graph acyclic, so a persisting configuration is
    counted once, not once per timestep.
    """
    events = []
    cleared: set = set()
    for cycle in cycles:
        punished = []
        removed = []
        for pid in cycle:
            if pid in cleared:
                continue
            cleared.add(pid)
            exp = origins.get(pid)
            if exp is not None and agent is not None:
                agent.replay.push(replace(exp, reward=reward))
                agent.train_step()
                punished.append(pid)
            remove_fn(pid)
            removed.append(pid)
        events.append(DeadlockEvent(cycle=tuple(cycle),
                                    punished=tuple(punished),
                                    removed=tuple(removed)))
    return events
