"""
Verification pipeline, one-shot and in rounds.

Each round merges a fragment into the extended history, generates and
prunes constraints and solves them. After an accepted round, fence-derived
epochs decide which transactions are frozen and obsolete, and transactions
whose whole poly-SCC consists of such candidates are deleted and
tombstoned.
"""
import asyncio
import logging
import math
from dataclasses import dataclass, field, replace
from typing import AsyncIterator, Dict, Iterable, Iterator, List, Optional, Set, Tuple, Union

import networkx as nx

from verifier_codec import decode_lines, format_txn, parse_line
from verifier_config import VerifierConfig, VerifyOptions
from verifier_constraints import Constraint, EncodeStats, gen_constraints
from verifier_graph import check_easy_reject
from verifier_history import (
    EPOCH_KEY,
    INIT_TXN,
    INIT_WRITE,
    Accept,
    CheckpointError,
    DeferredBufferOverflow,
    ExtendedHistory,
    History,
    HistorySyntaxError,
    Reject,
    RejectReason,
    Transaction,
    UnresolvedRead,
    VerifierError,
    merge_fragment,
)
from verifier_pruner import BothSidesConflict, CycleFound, ReachabilityMatrix, prune, transitive_closure
from verifier_solver import SolverInstance, encode, extract_schedule, solve

logger = logging.getLogger("Verifier")

Verdict = Union[Accept, Reject]


# --- Pipeline ---

def build_constraints(
    state: ExtendedHistory, options: VerifyOptions, stats: Optional[EncodeStats] = None
) -> Tuple[Optional[Reject], List[Constraint]]:
    """
    Generate constraints for the current known graph and prune them.

    Returns:
        (None or a Reject, remaining constraints)
    """
    stats = stats if stats is not None else EncodeStats()
    con = gen_constraints(
        state.graph, state.readfrom, state.wwpairs, state.writers_by_key(),
        add_edge=state.add_edge, stats=stats,
    )
    rejected = check_easy_reject(state)
    if rejected is not None:
        return rejected, con
    if options.prune:
        try:
            con, _ = prune(
                con, state.graph,
                max_iters=options.max_prune_iters,
                strategy=options.closure_strategy,
                bfs_threshold=options.bfs_threshold,
                add_edge=state.add_edge,
            )
        except BothSidesConflict as exc:
            logger.warning(str(exc))
            return Reject(
                RejectReason.BOTH_SIDES_CONFLICT,
                cycles=exc.cycles,
                constraints=[exc.constraint.cid],
                detail=str(exc),
            ), con
    stats.constraints_after_prune = len(con)
    return None, con


def encode_and_solve(
    state: ExtendedHistory, options: VerifyOptions, stats: Optional[EncodeStats] = None
) -> Tuple[Verdict, List[Constraint], Optional[SolverInstance]]:
    """Generate, prune and solve constraints for the current known graph."""
    rejected, con = build_constraints(state, options, stats)
    if rejected is not None:
        return rejected, con, None
    inst = encode(state.graph, con)
    return solve(inst, options.time_budget), con, inst


@dataclass
class VerifyResult:
    verdict: Verdict
    stats: EncodeStats = field(default_factory=EncodeStats)
    schedule: Optional[List[int]] = None
    instance: Optional[SolverInstance] = None
    state: Optional[ExtendedHistory] = None

    @property
    def accepted(self):
        return self.verdict.accepted


def ingest(h: History, options: VerifyOptions) -> Tuple[ExtendedHistory, Optional[Reject]]:
    """Build the extended history of a complete history and apply the easy-reject rules."""
    state = ExtendedHistory()
    try:
        merged = merge_fragment(state, h, session_order=options.session_order)
    except UnresolvedRead as exc:
        return state, Reject(RejectReason.UNRESOLVED_READ, txns=[exc.txn_id], detail=str(exc))
    if isinstance(merged, Reject):
        return state, merged
    return state, check_easy_reject(state)


def verify_history(h: History, options: Optional[VerifyOptions] = None) -> VerifyResult:
    """
    Verify a complete history in one shot.

    Raises:
        TimeBudgetExceeded: the solver ran out of time.
    """
    options = options or VerifierConfig.options()
    stats = EncodeStats(txns=len(h))
    state, rejected = ingest(h, options)
    stats.live_set = len(state.txns)
    if rejected is not None:
        return VerifyResult(rejected, stats, state=state)
    verdict, _, inst = encode_and_solve(state, options, stats)
    schedule = extract_schedule(verdict, state.graph) if verdict.accepted else None
    logger.info(f"One-shot verdict for {len(h)} transactions: {'accept' if verdict.accepted else 'reject'}")
    return VerifyResult(verdict, stats, schedule, inst, state)


def history_stats(h: History, options: Optional[VerifyOptions] = None) -> Tuple[EncodeStats, Optional[Reject]]:
    """Constraint accounting for a history without running the solver."""
    options = options or VerifierConfig.options()
    stats = EncodeStats(txns=len(h))
    state, rejected = ingest(h, options)
    stats.live_set = len(state.txns)
    if rejected is None:
        rejected, _ = build_constraints(state, options, stats)
    return stats, rejected


# --- Epochs and deletion ---

@dataclass
class EpochAnnotation:
    epochs: Dict[int, float] = field(default_factory=dict)
    epoch_agree: Optional[int] = None
    frozen: Set[int] = field(default_factory=set)
    obsolete: Set[int] = field(default_factory=set)
    candidate: Set[int] = field(default_factory=set)
    deletable: Set[int] = field(default_factory=set)

    @property
    def fepoch(self) -> Optional[int]:
        return None if self.epoch_agree is None else self.epoch_agree - 2


def assign_epochs(e: ExtendedHistory, expected_sessions: Optional[Set[int]] = None) -> EpochAnnotation:
    """
    Number write fences by their position along the EPOCH chain, give read
    fences the epoch of the fence they read (-1 for the initial value) and
    normal transactions the epoch of their next session fence minus one.

    epoch_agree is the minimum over sessions of each session's last fence
    epoch, and stays None while some live session has no fence or some
    session in expected_sessions has not been seen yet.
    """
    ann = EpochAnnotation()
    epochs = ann.epochs
    n = 0
    fence = e.wwpairs.get((EPOCH_KEY, INIT_TXN))
    while fence is not None:
        epochs[fence] = n
        n += 1
        fence = e.wwpairs.get((EPOCH_KEY, fence))

    for txn in e.txns.values():
        if not txn.is_fence:
            continue
        if EPOCH_KEY in txn.writes:
            if txn.txn_id not in epochs:
                logger.warning(f"Write fence {txn.txn_id} is not on the epoch chain")
                epochs[txn.txn_id] = math.inf
            continue
        wid = txn.reads[EPOCH_KEY]
        if wid == INIT_WRITE:
            epochs[txn.txn_id] = -1
        else:
            writer = e.resolve(EPOCH_KEY, wid)
            epochs[txn.txn_id] = epochs.get(writer, math.inf)

    agree = math.inf
    if expected_sessions and not set(expected_sessions) <= set(e.sessions):
        agree = None
    for sid, entries in e.sessions.items():
        cur = math.inf
        last = None
        for txn_id in reversed(entries):
            if e.txns[txn_id].is_fence:
                if last is None:
                    last = epochs[txn_id]
                cur = epochs[txn_id]
            else:
                epochs[txn_id] = cur - 1
        if last is None:
            agree = None
        elif agree is not None:
            agree = min(agree, last)
    if agree is not None and agree != math.inf:
        ann.epoch_agree = int(agree)
    return ann


def set_frozen(g: nx.DiGraph, ann: EpochAnnotation):
    """Frozen: epoch <= fepoch and every ancestor in g has epoch <= fepoch."""
    fepoch = ann.fepoch
    if fepoch is None:
        return
    low = {t for t in g.nodes if ann.epochs.get(t, math.inf) <= fepoch}
    seen = {t for t in g.nodes if t not in low}
    stack = list(seen)
    while stack:
        x = stack.pop()
        for y in g.successors(x):
            if y not in seen:
                seen.add(y)
                stack.append(y)
    ann.frozen = low - seen


def set_obsolete(e: ExtendedHistory, ann: EpochAnnotation, tr: ReachabilityMatrix):
    """Obsolete: epoch <= fepoch and, for every key it writes, a path to another such writer of the key."""
    fepoch = ann.fepoch
    if fepoch is None:
        return
    masks: Dict[str, int] = {}
    for key, writers in e.writers_by_key().items():
        masks[key] = tr.mask(w for w in writers if ann.epochs.get(w, math.inf) <= fepoch)
    for txn_id, txn in e.txns.items():
        if ann.epochs.get(txn_id, math.inf) > fepoch:
            continue
        writes = txn.writes
        if writes and all(tr.row(txn_id) & masks[key] for key in writes):
            ann.obsolete.add(txn_id)


def gen_psccs(con: Iterable[Constraint], g: nx.DiGraph) -> List[frozenset]:
    """Strongly connected components of g plus every edge of every constraint."""
    aug = nx.DiGraph()
    aug.add_nodes_from(g.nodes)
    aug.add_edges_from(g.edges())
    for c in con:
        aug.add_edges_from(c.edges())
    return sorted((frozenset(s) for s in nx.strongly_connected_components(aug)), key=min)


def set_candidates(e: ExtendedHistory, ann: EpochAnnotation, psccs: List[frozenset]):
    ann.candidate = {t for t in ann.frozen if t in ann.obsolete or e.txns[t].is_read_only}
    for pscc in psccs:
        if pscc <= ann.candidate:
            ann.deletable.update(t for t in pscc if not e.txns[t].touches(EPOCH_KEY))


def _reader_writer_pairs(e: ExtendedHistory, txn: Transaction) -> List[Tuple[str, int]]:
    pairs = []
    for key, wid in txn.reads.items():
        writer = e.resolve(key, wid)
        if writer is not None:
            pairs.append((key, writer))
    return pairs


def delete_txns(e: ExtendedHistory, doomed: Set[int]):
    """
    Remove transactions and their graph, readfrom, wwpairs and session
    entries, tombstoning their ids, write ids and written keys. Paths
    between surviving transactions that ran through deleted ones are kept
    as direct edges.
    """
    g = e.graph
    bridges = set()
    for p in g.nodes:
        if p in doomed:
            continue
        entry = [d for d in g.successors(p) if d in doomed]
        if not entry:
            continue
        seen = set(entry)
        stack = list(entry)
        while stack:
            x = stack.pop()
            for y in g.successors(x):
                if y in doomed:
                    if y not in seen:
                        seen.add(y)
                        stack.append(y)
                elif y != p:
                    bridges.add((p, y))

    pairs = {t: _reader_writer_pairs(e, e.txns[t]) for t in doomed}
    for t in sorted(doomed):
        txn = e.txns[t]
        for key, writer in pairs[t]:
            readers = e.readfrom.get((key, writer))
            if readers is not None:
                readers.discard(t)
                if not readers:
                    del e.readfrom[(key, writer)]
            if e.wwpairs.get((key, writer)) == t:
                del e.wwpairs[(key, writer)]
        for key, wid in txn.writes.items():
            e.readfrom.pop((key, t), None)
            e.wwpairs.pop((key, t), None)
            e.writes.pop(wid, None)
            e.tombstones.write_ids.add(wid)
            e.tombstones.keys.add(key)
        entries = e.sessions.get(txn.session_id, [])
        if t in entries:
            entries.remove(t)
            if not entries:
                del e.sessions[txn.session_id]
        e.tombstones.txns.add(t)
        del e.txns[t]
    g.remove_nodes_from(doomed)
    for u, v in sorted(bridges):
        e.add_edge(u, v, "prune")


def mark_and_delete(
    e: ExtendedHistory, con: List[Constraint], ann: EpochAnnotation, options: Optional[VerifyOptions] = None
) -> Tuple[ExtendedHistory, Set[int]]:
    """
    Classify transactions (frozen, obsolete, candidate, deletable) and
    delete the deletable ones. Fence transactions are never deleted.

    Returns:
        (e, ids deleted this round)
    """
    options = options or VerifierConfig.options()
    if ann.fepoch is None or not e.txns:
        return e, set()
    tr = transitive_closure(e.graph, options.closure_strategy, options.bfs_threshold)
    if isinstance(tr, CycleFound):
        logger.error(f"Accepted round left a cyclic known graph: {tr.cycle}")
        return e, set()
    set_frozen(e.graph, ann)
    set_obsolete(e, ann, tr)
    set_candidates(e, ann, gen_psccs(con, e.graph))
    doomed = set(ann.deletable)
    if doomed:
        delete_txns(e, doomed)
    logger.info(
        f"GC: epoch_agree={ann.epoch_agree} frozen={len(ann.frozen)} obsolete={len(ann.obsolete)} "
        f"candidates={len(ann.candidate)} deleted={len(doomed)} live={len(e.txns)}"
    )
    return e, doomed


# --- Rounds ---

@dataclass
class RoundResult:
    round: int
    verdict: Verdict
    admitted: int = 0
    deferred: int = 0
    deleted: int = 0
    live: int = 0
    constraints: int = 0
    epoch_agree: Optional[int] = None

    @property
    def accepted(self):
        return self.verdict.accepted

    def describe(self) -> List[str]:
        if self.verdict.accepted:
            return [
                f"round {self.round}: ACCEPT admitted={self.admitted} deferred={self.deferred} "
                f"deleted={self.deleted} live={self.live} constraints={self.constraints}"
            ]
        # certificate stays on the verdict line
        return [f"round {self.round}: " + " ".join(self.verdict.describe())]

    def to_dict(self):
        data = {
            "round": self.round,
            "admitted": self.admitted,
            "deferred": self.deferred,
            "deleted": self.deleted,
            "live": self.live,
            "constraints": self.constraints,
            "epoch_agree": self.epoch_agree,
        }
        data.update(self.verdict.to_dict())
        return data


class RoundVerifier:
    """
    Streaming verifier state: extended history, deferred transactions and
    round counter.

    expected_sessions names every client of the stream; deletion waits
    until each of them has issued a fence. Deletion is off when it is not
    given.
    """

    def __init__(self, options: Optional[VerifyOptions] = None, expected_sessions: Optional[Iterable[int]] = None):
        self.options = replace(options) if options else VerifierConfig.options()
        if self.options.gc and not self.options.session_order:
            logger.warning("Deletion needs client-order edges; running rounds without it")
            self.options.gc = False
        if self.options.gc and not expected_sessions:
            logger.warning("Deletion needs the full client set (expected_sessions); running rounds without it")
            self.options.gc = False
        self.state = ExtendedHistory()
        self.deferred: Dict[int, Transaction] = {}
        self.round = 0
        self.live_high_water = 0
        self.rejected: Optional[Reject] = None
        self.expected_sessions = set(expected_sessions) if expected_sessions else None
        self.deleted_total = 0
        self.failed: Optional[VerifierError] = None

    def _select(self, frag: History) -> List[Transaction]:
        pending = list(self.deferred.values()) + list(frag)
        base = set(self.state.writes) | self.state.tombstones.write_ids
        # drop transactions with unknown reads until the rest only read from each other
        selected = {t.txn_id for t in pending}
        changed = True
        while changed:
            changed = False
            known = base | {wid for t in pending if t.txn_id in selected for wid in t.writes.values()}
            for txn in pending:
                if txn.txn_id not in selected:
                    continue
                if any(wid != INIT_WRITE and wid not in known for wid in txn.reads.values()):
                    selected.discard(txn.txn_id)
                    changed = True
        self.deferred = {t.txn_id: t for t in pending if t.txn_id not in selected}
        if len(self.deferred) > self.options.deferred_limit:
            raise DeferredBufferOverflow(len(self.deferred), self.options.deferred_limit)
        return [t for t in pending if t.txn_id in selected]

    def feed(self, frag: History) -> RoundResult:
        """
        Verify one round. The verifier refuses further rounds after a
        rejection, and after an error escaped a round half way through.
        """
        if self.rejected is not None:
            raise RuntimeError("verifier already rejected the stream")
        if self.failed is not None:
            raise RuntimeError(f"verifier stopped mid-round: {self.failed}")
        try:
            return self._feed(frag)
        except VerifierError as exc:
            self.failed = exc
            raise

    def _feed(self, frag: History) -> RoundResult:
        index = self.round
        self.round += 1
        admitted = self._select(frag)
        if self.deleted_total and self.expected_sessions:
            for sid in sorted({t.session_id for t in admitted} - self.expected_sessions):
                logger.warning(f"Session {sid} is not an expected client and joined after deletions started")
        result = RoundResult(index, Accept(), admitted=len(admitted), deferred=len(self.deferred))

        merged = merge_fragment(self.state, History.of(admitted), session_order=self.options.session_order)
        verdict: Verdict
        con: List[Constraint] = []
        if isinstance(merged, Reject):
            verdict = merged
        else:
            verdict = check_easy_reject(self.state)
            if verdict is None:
                verdict, con, _ = encode_and_solve(self.state, self.options)
        result.verdict = verdict
        result.constraints = len(con)

        if not verdict.accepted:
            verdict.round = index
            self.rejected = verdict
            logger.warning(f"Round {index} rejected: {verdict.reason.value} {verdict.detail}")
        elif self.options.gc and not self.deferred:
            ann = assign_epochs(self.state, self.expected_sessions)
            result.epoch_agree = ann.epoch_agree
            _, doomed = mark_and_delete(self.state, con, ann, self.options)
            result.deleted = len(doomed)
            self.deleted_total += len(doomed)
        result.live = len(self.state.txns)
        self.live_high_water = max(self.live_high_water, result.live)
        logger.info(" ".join(result.describe()))
        return result

    def finish(self) -> Optional[Reject]:
        """End of stream: transactions still waiting on unknown writes are rejected."""
        if self.rejected is not None or not self.deferred:
            return None
        first = next(iter(self.deferred.values()))
        missing = [(k, w) for k, w in first.reads.items() if w != INIT_WRITE and self.state.resolve(k, w) is None]
        reject = Reject(
            RejectReason.UNRESOLVED_READ,
            txns=sorted(self.deferred),
            detail=f"{len(self.deferred)} transactions read unknown writes, e.g. txn {first.txn_id} {missing[:1]}",
            round=self.round,
        )
        self.rejected = reject
        return reject


def verify_rounds(
    fragments: Iterable[History], options: Optional[VerifyOptions] = None, verifier: Optional[RoundVerifier] = None
) -> Iterator[RoundResult]:
    """
    Verify a stream of fragments round by round, stopping after the first
    rejection. A final rejection round is emitted when the stream ends with
    unresolved deferred transactions.
    """
    verifier = verifier or RoundVerifier(options)
    for frag in fragments:
        result = verifier.feed(frag)
        yield result
        if not result.accepted:
            return
    final = verifier.finish()
    if final is not None:
        yield RoundResult(verifier.round, final, deferred=len(verifier.deferred), live=len(verifier.state.txns))


_END = object()


async def verify_rounds_async(
    fragments: Iterable[History],
    options: Optional[VerifyOptions] = None,
    verifier: Optional[RoundVerifier] = None,
    prefetch: int = 2,
) -> AsyncIterator[RoundResult]:
    """
    verify_rounds with fragment loading overlapped with solving: a producer
    task pulls up to `prefetch` fragments ahead into a queue, and a single
    consumer feeds them to the verifier in order.

    Errors raised while loading a fragment are re-raised in the consumer.
    """
    verifier = verifier or RoundVerifier(options)
    queue: asyncio.Queue = asyncio.Queue(maxsize=max(1, prefetch))
    it = iter(fragments)

    async def producer():
        try:
            while True:
                frag = await asyncio.to_thread(next, it, _END)
                await queue.put(frag)
                if frag is _END:
                    return
        except Exception as e:
            await queue.put(e)

    loader = asyncio.create_task(producer())
    try:
        while True:
            item = await queue.get()
            if item is _END:
                break
            if isinstance(item, Exception):
                raise item
            result = await asyncio.to_thread(verifier.feed, item)
            yield result
            if not result.accepted:
                return
        final = verifier.finish()
        if final is not None:
            yield RoundResult(verifier.round, final, deferred=len(verifier.deferred), live=len(verifier.state.txns))
    finally:
        loader.cancel()
        await asyncio.gather(loader, return_exceptions=True)


# --- Checkpoints ---

def save_checkpoint(verifier: RoundVerifier, path):
    """Write the verifier state (round, live txns, edges, tombstones, deferred) as text lines."""
    st = verifier.state
    lines = [f"R {verifier.round}"]
    lines.extend(format_txn(t) for t in st.txns.values())
    lines.extend(f"E {u} {v} {kind}" for u, v, kind in sorted(st.graph.edges(data="kind")))
    lines.extend(f"X {t}" for t in sorted(st.tombstones.txns))
    lines.extend(f"Y {w}" for w in sorted(st.tombstones.write_ids))
    lines.extend(f"Z {k}" for k in sorted(st.tombstones.keys))
    lines.extend("P " + format_txn(t) for t in verifier.deferred.values())
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(
    path, options: Optional[VerifyOptions] = None, expected_sessions: Optional[Iterable[int]] = None
) -> RoundVerifier:
    """
    Rebuild a RoundVerifier from a checkpoint file; readfrom and wwpairs are
    recomputed from the live transactions.

    Raises:
        CheckpointError: malformed file.
    """
    verifier = RoundVerifier(options, expected_sessions)
    st = verifier.state
    with open(path, "rb") as f:
        try:
            rows = [line.rstrip("\r\n") for line in decode_lines(f) if line.strip()]
        except HistorySyntaxError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
    if not rows or not rows[0].startswith("R "):
        raise CheckpointError(f"{path}: missing round header")
    try:
        verifier.round = int(rows[0].split()[1])
        edges = []
        for line_no, row in enumerate(rows[1:], start=2):
            tag = row[0]
            if tag == "T":
                txn = parse_line(row, line_no)
                st.txns[txn.txn_id] = txn
                st.graph.add_node(txn.txn_id)
                for key, wid in txn.writes.items():
                    st.writes[wid] = (txn.txn_id, key)
                st.add_session_entry(txn)
            elif tag == "E":
                _, u, v, kind = row.split()
                edges.append((int(u), int(v), kind))
            elif tag == "X":
                st.tombstones.txns.add(int(row.split()[1]))
            elif tag == "Y":
                st.tombstones.write_ids.add(int(row.split()[1]))
            elif tag == "Z":
                st.tombstones.keys.add(row.split(maxsplit=1)[1])
            elif tag == "P":
                txn = parse_line(row[2:], line_no)
                verifier.deferred[txn.txn_id] = txn
            else:
                raise CheckpointError(f"{path}:{line_no}: unknown record {tag!r}")
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    for u, v, kind in edges:
        if u not in st.txns or v not in st.txns:
            raise CheckpointError(f"{path}: edge {u} -> {v} references a non-live transaction")
        st.add_edge(u, v, kind)
    for txn in st.txns.values():
        writes = txn.writes
        for key, wid in txn.reads.items():
            writer = st.resolve(key, wid)
            if writer is None:
                continue
            st.readfrom.setdefault((key, writer), set()).add(txn.txn_id)
            if key in writes:
                st.wwpairs[(key, writer)] = txn.txn_id
    verifier.live_high_water = len(st.txns)
    verifier.deleted_total = len(st.tombstones.txns)
    logger.info(f"Loaded checkpoint at round {verifier.round} with {len(st.txns)} live transactions")
    return verifier
