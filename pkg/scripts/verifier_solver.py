"""
Decides whether an acyclic compatible graph exists for a known graph plus
two-sided constraints.

The search is DPLL-style over constraint choices. Acyclicity is kept
incrementally with an online topological order (Pearce-Kelly), so adding
and retracting a side costs a bounded local reordering. Checking a side
only searches the graph; after edges are added, only constraints with a
backward side spanning them are checked again. Once every open constraint
has a side that agrees with the current order, those sides are taken
together and the search ends.
"""
import logging
import time
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx

from verifier_constraints import Constraint
from verifier_history import Accept, Edge, Reject, RejectReason, VerifierError

logger = logging.getLogger("Verifier")

FIXED = -1
SHRINK_LIMIT = 64
_ON_PATH, _DONE = 1, 2


class TimeBudgetExceeded(VerifierError):
    def __init__(self, budget):
        self.budget = budget
        super().__init__(f"solver time budget of {budget}s exceeded")


@dataclass
class Choice:
    a: List[Edge]
    b: List[Edge]

    def side(self, s) -> List[Edge]:
        return self.a if s == 0 else self.b


@dataclass
class SolverInstance:
    n: int
    fixed_edges: List[Edge] = field(default_factory=list)
    choices: List[Choice] = field(default_factory=list)
    labels: List[int] = field(default_factory=list, compare=False)
    cids: List[int] = field(default_factory=list, compare=False)

    def label(self, v) -> int:
        return self.labels[v] if self.labels else v

    def cid(self, i) -> int:
        return self.cids[i] if self.cids else i


def encode(g: nx.DiGraph, con: Sequence[Constraint]) -> SolverInstance:
    """Reindex the known graph and constraints densely; known edges become fixed edges."""
    nodes = set(g.nodes)
    for c in con:
        for u, v in c.edges():
            nodes.add(u)
            nodes.add(v)
    labels = sorted(nodes)
    index = {v: i for i, v in enumerate(labels)}
    fixed = sorted((index[u], index[v]) for u, v in g.edges())
    choices = [
        Choice(
            a=sorted((index[u], index[v]) for u, v in c.first),
            b=sorted((index[u], index[v]) for u, v in c.second),
        )
        for c in con
    ]
    return SolverInstance(
        n=len(labels),
        fixed_edges=fixed,
        choices=choices,
        labels=labels,
        cids=[c.cid for c in con],
    )


def export(inst: SolverInstance) -> str:
    """Text form: `n <vertices>`, `e i j` per fixed edge, `c |A| |B|` then `a i j` / `b i j` lines."""
    lines = [f"n {inst.n}"]
    lines.extend(f"e {i} {j}" for i, j in inst.fixed_edges)
    for ch in inst.choices:
        lines.append(f"c {len(ch.a)} {len(ch.b)}")
        lines.extend(f"a {i} {j}" for i, j in ch.a)
        lines.extend(f"b {i} {j}" for i, j in ch.b)
    return "\n".join(lines) + "\n"


def parse_instance(text: str) -> SolverInstance:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows or rows[0][0] != "n" or len(rows[0]) != 2:
        raise ValueError("instance must start with 'n <vertices>'")
    inst = SolverInstance(n=int(rows[0][1]))
    pos = 1
    while pos < len(rows):
        tag = rows[pos][0]
        if tag == "e":
            inst.fixed_edges.append((int(rows[pos][1]), int(rows[pos][2])))
            pos += 1
        elif tag == "c":
            na, nb = int(rows[pos][1]), int(rows[pos][2])
            block = rows[pos + 1:pos + 1 + na + nb]
            if len(block) != na + nb or any(r[0] != "a" for r in block[:na]) or any(r[0] != "b" for r in block[na:]):
                raise ValueError(f"malformed choice block at row {pos + 1}")
            inst.choices.append(Choice(
                a=[(int(r[1]), int(r[2])) for r in block[:na]],
                b=[(int(r[1]), int(r[2])) for r in block[na:]],
            ))
            pos += 1 + na + nb
        else:
            raise ValueError(f"unknown instance row {' '.join(rows[pos])!r}")
    return inst


class OnlineTopoOrder:
    """Pearce-Kelly dynamic topological order with edge multiplicities."""

    def __init__(self, n: int):
        self.ord = list(range(n))
        self.out: List[Dict[int, int]] = [dict() for _ in range(n)]
        self.inc: List[Dict[int, int]] = [dict() for _ in range(n)]

    def forward_ok(self, edges) -> bool:
        """True if every edge already agrees with the current order."""
        ord_ = self.ord
        return all(u != v and ord_[u] < ord_[v] for u, v in edges)

    def _forward(self, start, upper, target):
        parent = {start: None}
        stack = [start]
        while stack:
            x = stack.pop()
            if x == target:
                path = []
                while x is not None:
                    path.append(x)
                    x = parent[x]
                return None, path[::-1]
            for y in self.out[x]:
                if y not in parent and self.ord[y] <= upper:
                    parent[y] = x
                    stack.append(y)
        return list(parent), None

    def _backward(self, start, lower):
        seen = {start}
        stack = [start]
        while stack:
            x = stack.pop()
            for y in self.inc[x]:
                if y not in seen and self.ord[y] >= lower:
                    seen.add(y)
                    stack.append(y)
        return list(seen)
    def cycle_with(self, edges) -> Optional[List[int]]:
        """
        The cycle that adding `edges` would close, as [x, ..., x], leaving the
        graph and the order untouched. A cycle leaves its highest-placed vertex
        through a backward edge of `edges`, so the search stays between the
        lowest backward head and the highest backward tail.
        """
        ord_ = self.ord
        back = [(u, v) for u, v in edges if ord_[u] >= ord_[v]]
        if not back:
            return None
        lo = min(ord_[v] for _, v in back)
        hi = max(ord_[u] for u, _ in back)
        extra: Dict[int, List[int]] = {}
        for u, v in edges:
            extra.setdefault(u, []).append(v)
        state: Dict[int, int] = {}
        for root in dict.fromkeys(v for _, v in back):
            if root in state:
                continue
            state[root] = _ON_PATH
            path = [root]
            succ = [self._successors(root, extra)]
            while succ:
                y = next(succ[-1], None)
                if y is None:
                    state[path.pop()] = _DONE
                    succ.pop()
                    continue
                if not lo <= ord_[y] <= hi:
                    continue
                mark = state.get(y)
                if mark == _ON_PATH:
                    return path[path.index(y):] + [y]
                if mark is None:
                    state[y] = _ON_PATH
                    path.append(y)
                    succ.append(self._successors(y, extra))
        return None

    def _successors(self, x, extra):
        yield from self.out[x]
        yield from extra.get(x, ())

    def add_edge(self, u, v) -> Optional[List[int]]:
        """Insert u -> v; returns the closed cycle [u, v, ..., u] instead when it would create one."""
        if u == v:
            return [u, u]
        count = self.out[u].get(v)
        if count:
            self.out[u][v] = count + 1
            self.inc[v][u] += 1
            return None
        lb, ub = self.ord[v], self.ord[u]
        if lb < ub:
            fwd, path = self._forward(v, ub, u)
            if path is not None:
                return [u] + path
            bwd = self._backward(u, lb)
            fwd.sort(key=self.ord.__getitem__)
            bwd.sort(key=self.ord.__getitem__)
            slots = sorted(self.ord[x] for x in bwd + fwd)
            for x, p in zip(bwd + fwd, slots):
                self.ord[x] = p
        self.out[u][v] = 1
        self.inc[v][u] = 1
        return None

    def remove_edge(self, u, v):
        count = self.out[u][v]
        if count == 1:
            del self.out[u][v]
            del self.inc[v][u]
        else:
            self.out[u][v] = count - 1
            self.inc[v][u] -= 1


class _Search:
    def __init__(self, inst: SolverInstance, time_budget: Optional[float], deadline: Optional[float] = None):
        self.inst = inst
        self.topo = OnlineTopoOrder(inst.n)
        self.assign: List[Optional[int]] = [None] * len(inst.choices)
        self.trail: List[Tuple[int, int, bool]] = []
        self.owners: Dict[Edge, List[int]] = {}
        self.budget = time_budget
        if deadline is None and time_budget is not None:
            deadline = time.monotonic() + time_budget
        self.deadline = deadline
        self.ticks = 0
        self.decisions = 0
        self.side_checks = 0
        self.order = sorted(
            range(len(inst.choices)),
            key=lambda i: (
                len(inst.choices[i].a) + len(inst.choices[i].b),
                min(min(e) for e in inst.choices[i].a + inst.choices[i].b),
                i,
            ),
        )

    def tick(self):
        self.ticks += 1
        if self.deadline is not None and self.ticks % 64 == 0 and time.monotonic() > self.deadline:
            raise TimeBudgetExceeded(self.budget)

    def add_side(self, edges, owner) -> Optional[List[int]]:
        added = []
        for u, v in edges:
            cycle = self.topo.add_edge(u, v)
            if cycle is not None:
                for x, y in reversed(added):
                    self.remove_owned(x, y)
                return cycle
            self.owners.setdefault((u, v), []).append(owner)
            added.append((u, v))
        return None

    def remove_owned(self, u, v):
        self.topo.remove_edge(u, v)
        owners = self.owners[(u, v)]
        owners.pop()
        if not owners:
            del self.owners[(u, v)]

    def remove_side(self, edges):
        for u, v in reversed(edges):
            self.remove_owned(u, v)

    def check_side(self, c, s) -> Optional[List[int]]:
        self.side_checks += 1
        return self.topo.cycle_with(self.inst.choices[c].side(s))

    def assign_side(self, c, s, decision) -> Optional[List[int]]:
        cycle = self.add_side(self.inst.choices[c].side(s), c)
        if cycle is None:
            self.assign[c] = s
            self.trail.append((c, s, decision))
        return cycle

    def unassigned(self) -> List[int]:
        return [c for c in self.order if self.assign[c] is None]

    def touched(self, added: List[Edge]) -> List[int]:
        """
        Unassigned constraints that may have gained a cycle from `added`.

        A new cycle through added edge x -> y and side S runs from y up to the
        tail of a backward edge of S and down from the head of a backward
        edge of S to x, so some backward edge tail sits at or after y and
        some backward edge head at or before x in the current order.
        """
        if not added:
            return []
        ord_ = self.topo.ord
        spans = sorted(((ord_[x], ord_[y]) for x, y in added), reverse=True)
        tails = [-ox for ox, _ in spans]
        lowest_head = []
        low = None
        for _, oy in spans:
            low = oy if low is None else min(low, oy)
            lowest_head.append(low)
        hit = []
        for c in self.order:
            if self.assign[c] is not None:
                continue
            ch = self.inst.choices[c]
            for side in (ch.a, ch.b):
                back = [(ord_[u], ord_[v]) for u, v in side if ord_[u] >= ord_[v]]
                if not back:
                    continue
                k = bisect_right(tails, -min(ov for _, ov in back))
                if k and lowest_head[k - 1] <= max(ou for ou, _ in back):
                    hit.append(c)
                    break
        return hit

    def propagate(self, dirty: List[int]):
        """Force constraints with one cyclic side until nothing changes; returns the first conflict."""
        while dirty:
            added: List[Edge] = []
            for c in dirty:
                if self.assign[c] is not None:
                    continue
                self.tick()
                cyc_a = self.check_side(c, 0)
                cyc_b = self.check_side(c, 1)
                if cyc_a is not None and cyc_b is not None:
                    return c, cyc_a, cyc_b
                if cyc_a is not None:
                    forced = 1
                elif cyc_b is not None:
                    forced = 0
                else:
                    continue
                if self.assign_side(c, forced, False) is None:
                    added.extend(self.inst.choices[c].side(forced))
            dirty = self.touched(added)
        return None

    def backtrack(self) -> bool:
        """Undo to the latest decision and flip it; False when none is left."""
        while self.trail:
            c, s, decision = self.trail.pop()
            self.remove_side(self.inst.choices[c].side(s))
            self.assign[c] = None
            if decision:
                if self.assign_side(c, 1 - s, False) is None:
                    return True
        return False

    def blame(self, cycle, c) -> List[int]:
        side_edges = set(self.inst.choices[c].a) | set(self.inst.choices[c].b)
        blamed = {c}
        for u, v in zip(cycle, cycle[1:]):
            if (u, v) in side_edges:
                continue
            owners = self.owners.get((u, v))
            if owners and owners[0] != FIXED:
                blamed.add(owners[0])
        return sorted(blamed)

    def conflict(self) -> Tuple[List[int], List[List[int]], int]:
        """Run to a verdict in dense indices: ([], [], -1) on accept, else (blamed, cycles, conflicting choice)."""
        dirty = list(self.order)
        while True:
            found = self.propagate(dirty)
            if found is not None:
                if any(decision for _, _, decision in self.trail):
                    self.backtrack()
                    dirty = self.unassigned()
                    continue
                c, cyc_a, cyc_b = found
                return sorted(set(self.blame(cyc_a, c)) | set(self.blame(cyc_b, c))), [cyc_a, cyc_b], c
            pending = self.unassigned()
            if not pending:
                return [], [], -1
            forward = self.topo.forward_ok
            choices = self.inst.choices
            stuck = next((c for c in pending if not forward(choices[c].a) and not forward(choices[c].b)), None)
            if stuck is None:
                # one side of each open constraint agrees with the current order: take them all
                for c in pending:
                    self.assign[c] = 0 if forward(choices[c].a) else 1
                return [], [], -1
            self.tick()
            self.decisions += 1
            side = 0
            if self.assign_side(stuck, side, True) is not None:
                # both sides were acyclic when propagation ended
                side = 1
                self.assign_side(stuck, side, False)
            dirty = self.touched(choices[stuck].side(side))

    def run(self) -> Union[Accept, Reject]:
        inst = self.inst
        cycle = self.add_side(inst.fixed_edges, FIXED)
        if cycle is not None:
            return Reject(
                RejectReason.KNOWN_CYCLE,
                cycles=[[inst.label(v) for v in cycle]],
                detail="known edges are cyclic",
            )
        blamed, cycles, c = self.conflict()
        if c >= 0:
            blamed, cycles, c = shrink_core(inst, blamed, cycles, c, self.deadline)
            return Reject(
                RejectReason.UNSATISFIABLE,
                cycles=[[inst.label(v) for v in cyc] for cyc in cycles],
                constraints=[inst.cid(i) for i in blamed],
                detail=f"both choices of constraint {inst.cid(c)} close a cycle",
            )
        choices = [s for s in self.assign]
        edges = sorted(
            (inst.label(u), inst.label(v))
            for c, s in enumerate(choices)
            for u, v in inst.choices[c].side(s)
        )
        return Accept(choices=choices, edges=edges)


def _unsatisfiable(inst: SolverInstance, keep: List[int], deadline: Optional[float]) -> Optional[Tuple[List[List[int]], int]]:
    """(cycles, conflicting choice) refuting the fixed edges plus choices `keep`; None when satisfiable."""
    sub = SolverInstance(n=inst.n, fixed_edges=inst.fixed_edges, choices=[inst.choices[i] for i in keep])
    search = _Search(sub, None, deadline)
    search.add_side(sub.fixed_edges, FIXED)
    _, cycles, c = search.conflict()
    return (cycles, keep[c]) if c >= 0 else None


def shrink_core(
    inst: SolverInstance, blamed: List[int], cycles: List[List[int]], conflicting: int, deadline: Optional[float] = None
) -> Tuple[List[int], List[List[int]], int]:
    """
    Greedily drop blamed choices (dense indices) while the fixed edges plus
    the rest stay unsatisfiable; cycles and the conflicting choice are
    swapped for those refuting the smaller set. When the blamed choices
    alone are satisfiable, small instances start over from every choice.
    Best effort: gives up past SHRINK_LIMIT choices or at the deadline.
    """
    best = (list(blamed), cycles, conflicting)
    if len(blamed) > SHRINK_LIMIT:
        return best
    try:
        core = list(blamed)
        if _unsatisfiable(inst, core, deadline) is None:
            if len(inst.choices) > SHRINK_LIMIT:
                return best
            core = list(range(len(inst.choices)))
            best = (core, cycles, conflicting)
        for candidate in list(core):
            if len(core) == 1:
                break
            keep = [i for i in core if i != candidate]
            refuted = _unsatisfiable(inst, keep, deadline)
            if refuted is not None:
                core = keep
                best = (keep, refuted[0], refuted[1])
    except TimeBudgetExceeded:
        logger.debug("Blame shrinking stopped at the time budget")
    if len(best[0]) != len(blamed):
        logger.debug(f"Blamed constraints {len(blamed)} -> {len(best[0])} after shrinking")
    return best


def solve(inst: SolverInstance, time_budget: Optional[float] = None) -> Union[Accept, Reject]:
    """
    Find an acyclic compatible graph, or a rejection certificate.

    Raises:
        TimeBudgetExceeded: the search ran past time_budget seconds.
    """
    search = _Search(inst, time_budget)
    verdict = search.run()
    logger.info(
        f"Solver: {len(inst.choices)} choices, {search.side_checks} side checks, {search.decisions} decisions -> "
        f"{'accept' if verdict.accepted else 'reject'}"
    )
    return verdict


def extract_schedule(model: Accept, g: nx.DiGraph) -> List[int]:
    """A serial order: a topological sort of the known graph plus the chosen sides."""
    full = nx.DiGraph()
    full.add_nodes_from(g.nodes)
    full.add_edges_from(g.edges())
    full.add_edges_from(model.edges)
    return list(nx.lexicographical_topological_sort(full))


def check_certificate(inst: SolverInstance, reject: Reject) -> bool:
    """
    Validate a rejection certificate edge by edge: every cycle is closed and
    each of its edges is a fixed edge or lies on a side of a blamed constraint.
    """
    if not reject.cycles:
        return False
    index = {label: i for i, label in enumerate(inst.labels)} if inst.labels else None
    allowed = set(inst.fixed_edges)
    blamed = set(reject.constraints)
    for i, ch in enumerate(inst.choices):
        if inst.cid(i) in blamed:
            allowed.update(ch.a)
            allowed.update(ch.b)
    for cycle in reject.cycles:
        if len(cycle) < 2 or cycle[0] != cycle[-1]:
            return False
        for u, v in zip(cycle, cycle[1:]):
            if index is not None:
                if u not in index or v not in index:
                    return False
                u, v = index[u], index[v]
            if (u, v) not in allowed:
                return False
    return True
