"""
Ground truth for small histories: serial-schedule search with replay, and
exhaustive assignment of the uncombined polygraph constraints.
"""
import logging
from itertools import product
from typing import Dict, List, Optional, Sequence

import networkx as nx

from verifier_config import VerifierConfig
from verifier_history import INIT_TXN, INIT_WRITE, History, OpKind, VerifierError

logger = logging.getLogger("Verifier")


class BoundExceeded(VerifierError):
    def __init__(self, what, size, bound):
        self.size = size
        self.bound = bound
        super().__init__(f"{what} {size} exceeds the oracle bound of {bound}")


def replay(h: History, schedule: Sequence[int]) -> bool:
    """True iff running the schedule on a single-copy store reproduces every read of h."""
    store: Dict[str, int] = {}
    for txn_id in schedule:
        for op in h.transactions[txn_id].ops:
            if op.kind == OpKind.READ:
                if store.get(op.key, INIT_WRITE) != op.write_id:
                    return False
            else:
                store[op.key] = op.write_id
    return True


def oracle_serializable(h: History, respect_sessions: bool = True, max_txns: Optional[int] = None) -> bool:
    """
    Search for a serial order (respecting each session's order when asked)
    under which every read sees the latest preceding write.

    Raises:
        BoundExceeded: more than max_txns transactions.
    """
    if max_txns is None:
        max_txns = VerifierConfig.ORACLE_MAX_TXNS
    if len(h) > max_txns:
        raise BoundExceeded("history size", len(h), max_txns)
    txns = list(h)
    if not txns:
        return True
    n = len(txns)
    pos = {t.txn_id: i for i, t in enumerate(txns)}
    # Bit mask of session predecessors each transaction must wait for.
    preds = [0] * n
    if respect_sessions:
        for entries in h.sessions.values():
            for i, txn_id in enumerate(entries):
                for earlier in entries[:i]:
                    preds[pos[txn_id]] |= 1 << pos[earlier]
    full = (1 << n) - 1
    failed = set()

    def extend(done: int, store: Dict[str, int]) -> bool:
        if done == full:
            return True
        state = (done, frozenset(store.items()))
        if state in failed:
            return False
        for i, txn in enumerate(txns):
            if done >> i & 1 or preds[i] & ~done:
                continue
            if any(store.get(k, INIT_WRITE) != wid for k, wid in txn.reads.items()):
                continue
            nxt = dict(store)
            nxt.update(txn.writes)
            if extend(done | 1 << i, nxt):
                return True
        failed.add(state)
        return False

    return extend(0, {})


def polygraph(h: History):
    """
    The uncombined polygraph with the initial transaction materialized as
    node INIT_TXN preceding everything: known WR edges and one
    <(R, W2), (W2, W1)> constraint per read and other writer.
    """
    g = nx.DiGraph()
    g.add_node(INIT_TXN)
    writer_of = {}
    writers: Dict[str, set] = {}
    for txn in h:
        g.add_node(txn.txn_id)
        g.add_edge(INIT_TXN, txn.txn_id)
        for key, wid in txn.writes.items():
            writer_of[wid] = txn.txn_id
            writers.setdefault(key, set()).add(txn.txn_id)
    constraints = set()
    for txn in h:
        for key, wid in txn.reads.items():
            w1 = INIT_TXN if wid == INIT_WRITE else writer_of[wid]
            if w1 != INIT_TXN:
                g.add_edge(w1, txn.txn_id)
            for w2 in (writers.get(key, set()) | {INIT_TXN}) - {w1, txn.txn_id}:
                constraints.add(((txn.txn_id, w2), (w2, w1)))
    return g, sorted(constraints)


def brute_force_polygraph(h: History, max_constraints: Optional[int] = None) -> bool:
    """
    True iff some assignment of the uncombined polygraph constraints yields
    an acyclic graph. Constraints with an edge into the initial transaction
    are decided up front.

    Raises:
        BoundExceeded: more than max_constraints undecided constraints.
    """
    if max_constraints is None:
        max_constraints = VerifierConfig.ORACLE_MAX_CONSTRAINTS
    index = h.write_index()
    for txn in h:
        for key, wid in txn.reads.items():
            if wid != INIT_WRITE and (wid not in index or index[wid][1] != key):
                return False
    g, constraints = polygraph(h)
    open_constraints = []
    for first, second in constraints:
        if first[1] == INIT_TXN:
            g.add_edge(*second)
        elif second[1] == INIT_TXN:
            g.add_edge(*first)
        else:
            open_constraints.append((first, second))
    if not nx.is_directed_acyclic_graph(g):
        return False
    if len(open_constraints) > max_constraints:
        raise BoundExceeded("constraint count", len(open_constraints), max_constraints)
    for picks in product((0, 1), repeat=len(open_constraints)):
        chosen = [c[p] for c, p in zip(open_constraints, picks)]
        added = [e for e in chosen if not g.has_edge(*e)]
        g.add_edges_from(added)
        acyclic = nx.is_directed_acyclic_graph(g)
        g.remove_edges_from(added)
        if acyclic:
            return True
    return False


def schedule_matches(h: History, schedule: List[int]) -> bool:
    """Replay check for a schedule that must also cover every transaction of h."""
    return sorted(schedule) == sorted(h.transactions) and replay(h, schedule)
