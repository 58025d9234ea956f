"""
Constraint generation: write combining into chains, anti-dependency
inference and coalescing of chain pairs into two-sided constraints.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

import networkx as nx

from verifier_history import INIT_TXN, Edge, InternalInvariantViolation

logger = logging.getLogger("Verifier")


@dataclass
class Chain:
    key: str
    txns: List[int]

    @property
    def head(self):
        return self.txns[0]

    @property
    def tail(self):
        return self.txns[-1]

    @property
    def is_initial(self):
        return self.txns[0] == INIT_TXN

    def __len__(self):
        return len(self.txns)


@dataclass(frozen=True)
class Constraint:
    """Exactly one side must be fully included in any compatible graph."""
    first: FrozenSet[Edge]
    second: FrozenSet[Edge]
    key: str = ""
    cid: int = -1

    def sides(self):
        return (self.first, self.second)

    def edges(self):
        return self.first | self.second


@dataclass
class EncodeStats:
    txns: int = 0
    constraints_original: int = 0
    constraints_after_combine: int = 0
    constraints_after_coalesce: int = 0
    constraints_after_prune: int = 0
    forced_initial_edges: int = 0
    chains_per_key: Dict[int, int] = field(default_factory=dict)
    live_set: int = 0

    def to_dict(self):
        return {
            "txns": self.txns,
            "constraints_original": self.constraints_original,
            "constraints_after_combine": self.constraints_after_combine,
            "constraints_after_coalesce": self.constraints_after_coalesce,
            "constraints_after_prune": self.constraints_after_prune,
            "forced_initial_edges": self.forced_initial_edges,
            "chains_per_key": {str(k): v for k, v in sorted(self.chains_per_key.items())},
            "live_set": self.live_set,
        }


def _readers(readfrom, key, txn) -> Set[int]:
    return readfrom.get((key, txn), set())


def init_chains(writers: Dict[str, List[int]], readfrom, wwpairs) -> Dict[str, List[Chain]]:
    """
    One singleton chain per write. The initial transaction heads its own
    chain on a key whenever something reads or overwrites the initial value.
    """
    chains: Dict[str, List[Chain]] = {}
    keys = set(writers)
    keys.update(k for (k, w) in readfrom if w == INIT_TXN)
    keys.update(k for (k, w) in wwpairs if w == INIT_TXN)
    for key in sorted(keys):
        per_key = []
        if (key, INIT_TXN) in readfrom or (key, INIT_TXN) in wwpairs:
            per_key.append(Chain(key, [INIT_TXN]))
        per_key.extend(Chain(key, [t]) for t in writers.get(key, []))
        chains[key] = per_key
    return chains


def combine_writes(chains: Dict[str, List[Chain]], wwpairs: Dict[Tuple[str, int], int]) -> Dict[str, List[Chain]]:
    """
    Splice the chain ending at t1 with the chain starting at t2 for every
    wwpairs entry <k, t1> -> t2.

    Raises:
        InternalInvariantViolation: t1 is not a chain tail or t2 not a chain head.
    """
    combined: Dict[str, List[Chain]] = {}
    pairs_by_key: Dict[str, List[Tuple[int, int]]] = {}
    for (key, t1), t2 in wwpairs.items():
        pairs_by_key.setdefault(key, []).append((t1, t2))

    for key, per_key in chains.items():
        by_head = {c.head: Chain(key, list(c.txns)) for c in per_key}
        by_tail = {c.tail: c for c in by_head.values()}
        for t1, t2 in sorted(pairs_by_key.get(key, [])):
            left = by_tail.get(t1)
            right = by_head.get(t2)
            if left is None or right is None:
                raise InternalInvariantViolation(
                    f"cannot splice {t1} -> {t2} on {key!r}: not a chain tail/head"
                )
            if left is right:
                raise InternalInvariantViolation(f"chain on {key!r} closes on itself at {t1} -> {t2}")
            del by_head[t2]
            del by_tail[t1]
            left.txns.extend(right.txns)
            by_tail[left.tail] = left
        combined[key] = sorted(by_head.values(), key=lambda c: c.head)
    return combined


def infer_rw_edges(chains: Dict[str, List[Chain]], readfrom, g: nx.DiGraph, add_edge=None) -> int:
    """
    For every reader of chain[i] other than chain[i+1], add the
    anti-dependency edge reader -> chain[i+1].

    Returns:
        number of new edges
    """
    added = 0
    for key, per_key in chains.items():
        for chain in per_key:
            for cur, nxt in zip(chain.txns, chain.txns[1:]):
                for rtx in sorted(_readers(readfrom, key, cur)):
                    if rtx == nxt or rtx == INIT_TXN:
                        continue
                    if not g.has_edge(rtx, nxt):
                        if add_edge is not None:
                            add_edge(rtx, nxt, "rw")
                        else:
                            g.add_edge(rtx, nxt, kind="rw")
                        added += 1
    return added


def _side(chain_i: Chain, chain_j: Chain, key, readfrom) -> FrozenSet[Edge]:
    readers = _readers(readfrom, key, chain_i.tail)
    if readers:
        edges = {(r, chain_j.head) for r in readers}
    else:
        edges = {(chain_i.tail, chain_j.head)}
    return frozenset((a, b) for a, b in edges if a != b)


def coalesce(chain_i: Chain, chain_j: Chain, key, readfrom) -> Constraint:
    return Constraint(
        first=_side(chain_i, chain_j, key, readfrom),
        second=_side(chain_j, chain_i, key, readfrom),
        key=key,
    )


def initial_chain_edges(init_chain: Chain, other: Chain, key, readfrom) -> Set[Edge]:
    """
    The initial chain precedes every other chain on its key, so the side
    "initial chain first" always holds; edges out of INIT_TXN are implied.
    """
    return {e for e in _side(init_chain, other, key, readfrom) if INIT_TXN not in e}


def count_polygraph_constraints(writers: Dict[str, List[int]], readfrom) -> int:
    """Constraints of the uncombined encoding: one per read and other writer of the key."""
    total = 0
    for (key, writer), readers in readfrom.items():
        others = set(writers.get(key, []))
        others.discard(writer)
        for r in readers:
            total += len(others - {r})
    return total


def gen_constraints(
    g: nx.DiGraph,
    readfrom,
    wwpairs,
    writers: Dict[str, List[int]],
    add_edge=None,
    stats: Optional[EncodeStats] = None,
) -> List[Constraint]:
    """
    Build chains, infer RW edges into g and emit one constraint per
    unordered pair of chains per key. Pairs involving the initial chain are
    resolved into known edges instead.

    Args:
        g: known graph, mutated
        readfrom: <key, writer> -> readers
        wwpairs: <key, writer> -> RMW successor
        writers: key -> live writer txns
        add_edge: optional edge adder (u, v, kind) used instead of g.add_edge
        stats: filled with constraint counts when given

    Returns:
        constraints, numbered by position (cid)
    """
    def _add(u, v, kind):
        if add_edge is not None:
            add_edge(u, v, kind)
        elif not g.has_edge(u, v):
            g.add_edge(u, v, kind=kind)

    chains = combine_writes(init_chains(writers, readfrom, wwpairs), wwpairs)
    rw_added = infer_rw_edges(chains, readfrom, g, add_edge=_add)

    constraints: List[Constraint] = []
    forced = 0
    per_read = 0
    for key, per_key in chains.items():
        for ci, cj in combinations(per_key, 2):
            if ci.is_initial or cj.is_initial:
                init_chain, other = (ci, cj) if ci.is_initial else (cj, ci)
                for u, v in sorted(initial_chain_edges(init_chain, other, key, readfrom)):
                    if not g.has_edge(u, v):
                        _add(u, v, "rw" if u != init_chain.tail else "prune")
                        forced += 1
                continue
            con = coalesce(ci, cj, key, readfrom)
            if not con.first or not con.second:
                raise InternalInvariantViolation(f"empty constraint side on {key!r} between {ci.head} and {cj.head}")
            constraints.append(con)
            per_read += max(1, len(_readers(readfrom, key, ci.tail)) + len(_readers(readfrom, key, cj.tail)))

    constraints = [
        Constraint(c.first, c.second, c.key, cid) for cid, c in enumerate(constraints)
    ]
    if stats is not None:
        stats.constraints_original = count_polygraph_constraints(writers, readfrom)
        stats.constraints_after_combine = per_read
        stats.constraints_after_coalesce = len(constraints)
        stats.forced_initial_edges = forced
        stats.chains_per_key = dict(Counter(len(per_key) for per_key in chains.values()))
    logger.info(
        f"Constraints: {len(constraints)} from {sum(len(v) for v in chains.values())} chains "
        f"({rw_added} rw edges, {forced} initial-order edges)"
    )
    return constraints
