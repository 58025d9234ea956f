"""
All-pairs reachability over the known graph and constraint pruning.

Reachability rows are Python ints used as bitsets over topologically
indexed vertices: bit j of row i is set iff there is a path i ~> j.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import networkx as nx

from verifier_config import VerifierConfig
from verifier_constraints import Constraint
from verifier_graph import find_cycle
from verifier_history import Edge, VerifierError

logger = logging.getLogger("Verifier")


def iter_bits(bits: int) -> Iterator[int]:
    while bits:
        low = bits & -bits
        yield low.bit_length() - 1
        bits ^= low


@dataclass
class CycleFound:
    cycle: List[int]


class BothSidesConflict(VerifierError):
    def __init__(self, constraint: Constraint, cycles: List[List[int]]):
        self.constraint = constraint
        self.cycles = cycles
        super().__init__(f"both sides of constraint {constraint.cid} on {constraint.key!r} close a cycle")


class ReachabilityMatrix:
    """Bit-packed reachability over vertices indexed by a topological order."""

    def __init__(self, order: Sequence[int], rows: List[int]):
        self.order = list(order)
        self.index: Dict[int, int] = {v: i for i, v in enumerate(self.order)}
        self.rows = rows

    def __len__(self):
        return len(self.order)

    def __eq__(self, other):
        if not isinstance(other, ReachabilityMatrix):
            return NotImplemented
        return self.as_sets() == other.as_sets()

    def reaches(self, a, b) -> bool:
        ia = self.index.get(a)
        ib = self.index.get(b)
        if ia is None or ib is None:
            return False
        return (self.rows[ia] >> ib) & 1 == 1

    def descendants(self, a) -> List[int]:
        ia = self.index.get(a)
        if ia is None:
            return []
        return [self.order[j] for j in iter_bits(self.rows[ia])]

    def row(self, a) -> int:
        return self.rows[self.index[a]]

    def mask(self, vertices) -> int:
        bits = 0
        for v in vertices:
            i = self.index.get(v)
            if i is not None:
                bits |= 1 << i
        return bits

    def as_sets(self) -> Dict[int, frozenset]:
        return {v: frozenset(self.descendants(v)) for v in self.order}


def _closure_bfs(g, order, index):
    rows = []
    for v in order:
        bits = 0
        for d in nx.descendants(g, v):
            bits |= 1 << index[d]
        rows.append(bits)
    return rows


def _closure_propagate(g, order, index):
    rows = [0] * len(order)
    for i in range(len(order) - 1, -1, -1):
        bits = 0
        for w in g.successors(order[i]):
            j = index[w]
            bits |= (1 << j) | rows[j]
        rows[i] = bits
    return rows


def _closure_squaring(g, order, index):
    rows = [0] * len(order)
    for u, v in g.edges():
        rows[index[u]] |= 1 << index[v]
    # R <- R | R*R in place, sweeping from the sinks up. A row is closed once every
    # bit in it came from an expanded successor row that was itself closed.
    absorbed = [0] * len(order)
    closed = [False] * len(order)
    sweeps = 0
    while not all(closed):
        sweeps += 1
        for i in range(len(order) - 1, -1, -1):
            if closed[i]:
                continue
            bits = rows[i]
            for j in iter_bits(bits & ~absorbed[i]):
                bits |= rows[j]
                if closed[j]:
                    absorbed[i] |= (1 << j) | rows[j]
            rows[i] = bits
            closed[i] = absorbed[i] == bits
    logger.debug(f"Closure by squaring: {len(order)} vertices, {sweeps} sweeps")
    return rows


def pick_strategy(strategy: str, vertices: int, bfs_threshold: int) -> str:
    """"auto" is BFS below bfs_threshold vertices and repeated squaring from there up."""
    if strategy == "auto":
        return "bfs" if vertices < bfs_threshold else "squaring"
    return strategy


def transitive_closure(
    g: nx.DiGraph, strategy: Optional[str] = None, bfs_threshold: Optional[int] = None
) -> Union[ReachabilityMatrix, CycleFound]:
    """
    Exact reachability of g, or the cycle when g is cyclic.

    Args:
        g: known graph
        strategy: "auto", "bfs", "propagate" or "squaring"
        bfs_threshold: vertex count below which "auto" uses BFS

    Returns:
        ReachabilityMatrix or CycleFound
    """
    strategy = strategy or VerifierConfig.CLOSURE_STRATEGY
    if bfs_threshold is None:
        bfs_threshold = VerifierConfig.CLOSURE_BFS_THRESHOLD
    try:
        order = list(nx.lexicographical_topological_sort(g))
    except nx.NetworkXUnfeasible:
        return CycleFound(find_cycle(g))
    index = {v: i for i, v in enumerate(order)}

    strategy = pick_strategy(strategy, len(order), bfs_threshold)
    if strategy == "bfs":
        rows = _closure_bfs(g, order, index)
    elif strategy == "propagate":
        rows = _closure_propagate(g, order, index)
    elif strategy == "squaring":
        rows = _closure_squaring(g, order, index)
    else:
        raise ValueError(f"unknown closure strategy {strategy!r}")
    return ReachabilityMatrix(order, rows)


def _closing_edge(side, tr: ReachabilityMatrix) -> Optional[Edge]:
    for a, b in sorted(side):
        if tr.reaches(b, a):
            return (a, b)
    return None


def _witness(g: nx.DiGraph, edge: Edge) -> List[int]:
    a, b = edge
    path = nx.shortest_path(g, b, a)
    return [a] + path


def prune(
    con: List[Constraint],
    g: nx.DiGraph,
    max_iters: Optional[int] = None,
    strategy: Optional[str] = None,
    bfs_threshold: Optional[int] = None,
    add_edge=None,
) -> Tuple[List[Constraint], nx.DiGraph]:
    """
    Resolve constraints whose one side closes a cycle against the known
    graph's reachability by adding the other side to g. Iterates until
    fixpoint or max_iters closures.

    Stops early, leaving g as is, if forced edges made g cyclic; the solver
    reports that cycle.

    Raises:
        BothSidesConflict: both sides of a constraint close a cycle.
    """
    if max_iters is None:
        max_iters = VerifierConfig.MAX_PRUNE_ITERS

    def _add(u, v):
        if add_edge is not None:
            add_edge(u, v, "prune")
        elif not g.has_edge(u, v):
            g.add_edge(u, v, kind="prune")

    remaining = list(con)
    for iteration in range(max_iters):
        if not remaining:
            break
        tr = transitive_closure(g, strategy, bfs_threshold)
        if isinstance(tr, CycleFound):
            logger.warning(f"Pruning produced a known-graph cycle at iteration {iteration}")
            break
        survivors = []
        resolved = 0
        for c in remaining:
            first_closes = _closing_edge(c.first, tr)
            second_closes = _closing_edge(c.second, tr)
            if first_closes and second_closes:
                raise BothSidesConflict(c, [_witness(g, first_closes), _witness(g, second_closes)])
            if first_closes:
                for u, v in sorted(c.second):
                    _add(u, v)
                resolved += 1
            elif second_closes:
                for u, v in sorted(c.first):
                    _add(u, v)
                resolved += 1
            else:
                survivors.append(c)
        remaining = survivors
        logger.info(f"Prune iteration {iteration}: resolved {resolved}, {len(remaining)} remain")
        if resolved == 0:
            break
    return remaining, g
