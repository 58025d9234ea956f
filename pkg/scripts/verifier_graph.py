import logging
from typing import Optional, Union

import networkx as nx

from verifier_history import (
    INIT_TXN,
    INIT_WRITE,
    DuplicateTxn,
    DuplicateWriteId,
    ExtendedHistory,
    History,
    Reject,
    RejectReason,
    UnresolvedRead,
)

logger = logging.getLogger("Verifier")


def create_known_graph(
    acc: ExtendedHistory, frag: History, session_order: bool = True
) -> Union[ExtendedHistory, Reject]:
    """
    Extend the known graph with a fragment: one node per transaction, a WR
    edge per read, readfrom and wwpairs entries, and client-order edges
    between consecutive transactions of each session.

    The initial transaction is never materialized; reads of write id 0 are
    recorded in readfrom under writer INIT_TXN without an edge.

    Args:
        acc: the extended history, mutated in place
        frag: continuation fragment
        session_order: add client-order (CO) edges

    Returns:
        acc, or a Reject for multiple successive writes, stale reads of
        deleted transactions, misdirected reads and self reads.
    """
    tomb = acc.tombstones
    # Register nodes and writes first so intra-fragment reads resolve in any order.
    for txn in frag:
        if txn.txn_id in acc.txns or txn.txn_id in tomb.txns:
            raise DuplicateTxn(txn.txn_id)
        for key, wid in txn.writes.items():
            if wid in acc.writes or wid in tomb.write_ids:
                raise DuplicateWriteId(wid)
            acc.writes[wid] = (txn.txn_id, key)
        acc.txns[txn.txn_id] = txn
        acc.graph.add_node(txn.txn_id)

    for txn in frag:
        writes = txn.writes
        for key, wid in txn.reads.items():
            if wid == INIT_WRITE:
                if key in tomb.keys:
                    return Reject(
                        RejectReason.STALE_READ_OF_DELETED,
                        txns=[txn.txn_id],
                        detail=f"txn {txn.txn_id} reads the initial value of {key!r} overwritten by a deleted transaction",
                    )
                writer = INIT_TXN
            elif wid in tomb.write_ids:
                return Reject(
                    RejectReason.STALE_READ_OF_DELETED,
                    txns=[txn.txn_id],
                    detail=f"txn {txn.txn_id} reads {key!r} from deleted write {wid}",
                )
            else:
                found = acc.writes.get(wid)
                if found is None:
                    raise UnresolvedRead(txn.txn_id, key, wid)
                writer, written_key = found
                if written_key != key:
                    return Reject(
                        RejectReason.MISDIRECTED_READ,
                        txns=[txn.txn_id, writer],
                        detail=f"txn {txn.txn_id} reads {key!r} from write {wid} of key {written_key!r}",
                    )
                if writer == txn.txn_id:
                    return Reject(
                        RejectReason.KNOWN_CYCLE,
                        cycles=[[writer, writer]],
                        txns=[writer],
                        detail=f"txn {writer} reads its own write of {key!r}",
                    )
                acc.add_edge(writer, txn.txn_id, "wr")

            acc.readfrom.setdefault((key, writer), set()).add(txn.txn_id)
            if key in writes:
                successor = acc.wwpairs.get((key, writer))
                if successor is not None and successor != txn.txn_id:
                    return Reject(
                        RejectReason.MULTIPLE_SUCCESSIVE_WRITES,
                        txns=sorted([successor, txn.txn_id]),
                        detail=f"txns {successor} and {txn.txn_id} both overwrite {key!r} written by {writer}",
                    )
                acc.wwpairs[(key, writer)] = txn.txn_id

    touched = set()
    for txn in frag:
        acc.add_session_entry(txn)
        touched.add(txn.session_id)
    if session_order:
        for sid in sorted(touched):
            entries = acc.sessions[sid]
            for a, b in zip(entries, entries[1:]):
                acc.add_edge(a, b, "co")

    logger.debug(
        f"Known graph: {acc.graph.number_of_nodes()} nodes, {acc.graph.number_of_edges()} edges "
        f"after {len(frag)} new transactions"
    )
    return acc


def find_cycle(g: nx.DiGraph) -> Optional[list]:
    """Return a cycle of g as a closed node list [a, b, ..., a], or None."""
    try:
        edges = nx.find_cycle(g)
    except nx.NetworkXNoCycle:
        return None
    cycle = [u for u, _ in edges]
    cycle.append(cycle[0])
    return cycle


def check_easy_reject(e: ExtendedHistory) -> Optional[Reject]:
    """
    Reject a known graph that already contains a cycle. The multiple
    successive writes half of the easy-reject rules is enforced by
    create_known_graph.

    Returns:
        None when the known graph is acyclic, otherwise a Reject with the cycle.
    """
    cycle = find_cycle(e.graph)
    if cycle is None:
        return None
    logger.warning(f"Known graph cycle: {' -> '.join(str(t) for t in cycle)}")
    return Reject(RejectReason.KNOWN_CYCLE, cycles=[cycle], txns=sorted(set(cycle)))
