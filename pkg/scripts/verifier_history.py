"""
Shared domain types: operations, transactions, histories, the extended
history accumulated across rounds, verdicts and the error hierarchy.
"""
import bisect
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple

import networkx as nx

logger = logging.getLogger("Verifier")

# The abstract initial transaction / write of every key.
INIT_TXN = 0
INIT_WRITE = 0
EPOCH_KEY = "EPOCH"

Edge = Tuple[int, int]

EDGE_KINDS = ("wr", "rw", "co", "prune")


# --- Errors ---

class VerifierError(Exception):
    """Base class for every error raised by the verifier."""


class HistoryError(VerifierError):
    """Malformed history input."""


class HistorySyntaxError(HistoryError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class DuplicateTxn(HistoryError):
    def __init__(self, txn_id):
        self.txn_id = txn_id
        super().__init__(f"duplicate transaction id {txn_id}")


class DuplicateWriteId(HistoryError):
    def __init__(self, write_id):
        self.write_id = write_id
        super().__init__(f"duplicate write id {write_id}")


class NonUniqueKeyAccess(HistoryError):
    def __init__(self, txn_id, key):
        self.txn_id = txn_id
        self.key = key
        super().__init__(f"transaction {txn_id} accesses key {key!r} twice with the same operation")


class ReadAfterWrite(HistoryError):
    def __init__(self, txn_id, key):
        self.txn_id = txn_id
        self.key = key
        super().__init__(f"transaction {txn_id} reads key {key!r} after writing it")


class MalformedFence(HistoryError):
    def __init__(self, txn_id, reason):
        self.txn_id = txn_id
        super().__init__(f"fence transaction {txn_id}: {reason}")


class UnresolvedRead(VerifierError):
    def __init__(self, txn_id, key, write_id):
        self.txn_id = txn_id
        self.key = key
        self.write_id = write_id
        super().__init__(f"transaction {txn_id} reads {key!r} from unknown write {write_id}")


class InternalInvariantViolation(VerifierError):
    pass


class DeferredBufferOverflow(VerifierError):
    def __init__(self, size, limit):
        self.size = size
        self.limit = limit
        super().__init__(f"{size} deferred transactions exceed the limit of {limit}")


class CheckpointError(VerifierError):
    pass


# --- Operations and transactions ---

class OpKind(str, Enum):
    READ = "r"
    WRITE = "w"


@dataclass(frozen=True)
class Operation:
    kind: OpKind
    key: str
    write_id: int

    @classmethod
    def read(cls, key, write_id):
        return cls(OpKind.READ, key, write_id)

    @classmethod
    def write(cls, key, write_id):
        return cls(OpKind.WRITE, key, write_id)


@dataclass
class Transaction:
    txn_id: int
    session_id: int
    seq: int
    ops: List[Operation] = field(default_factory=list)
    is_fence: bool = False
    committed: bool = True

    @property
    def reads(self) -> Dict[str, int]:
        return {op.key: op.write_id for op in self.ops if op.kind == OpKind.READ}

    @property
    def writes(self) -> Dict[str, int]:
        return {op.key: op.write_id for op in self.ops if op.kind == OpKind.WRITE}

    def touches(self, key) -> bool:
        return any(op.key == key for op in self.ops)

    @property
    def is_read_only(self) -> bool:
        return all(op.kind == OpKind.READ for op in self.ops)

    def validate(self):
        """Check the per-transaction invariants, raising a HistoryError on violation."""
        seen_reads = set()
        seen_writes = set()
        for op in self.ops:
            if op.kind == OpKind.READ:
                if op.key in seen_reads:
                    raise NonUniqueKeyAccess(self.txn_id, op.key)
                if op.key in seen_writes:
                    raise ReadAfterWrite(self.txn_id, op.key)
                seen_reads.add(op.key)
            else:
                if op.key in seen_writes:
                    raise NonUniqueKeyAccess(self.txn_id, op.key)
                if op.write_id == INIT_WRITE:
                    raise HistoryError(f"transaction {self.txn_id} writes reserved write id 0")
                seen_writes.add(op.key)
        if self.txn_id == INIT_TXN:
            raise HistoryError("transaction id 0 is reserved for the initial transaction")
        keys = seen_reads | seen_writes
        if self.is_fence:
            if keys != {EPOCH_KEY}:
                raise MalformedFence(self.txn_id, f"touches {sorted(keys)} instead of {EPOCH_KEY!r} only")
            if EPOCH_KEY not in seen_reads:
                raise MalformedFence(self.txn_id, "does not read the epoch key")
        elif EPOCH_KEY in keys:
            raise MalformedFence(self.txn_id, "normal transaction touches the epoch key")


@dataclass
class History:
    """Committed transactions keyed by id; insertion order is commit order."""
    transactions: Dict[int, Transaction] = field(default_factory=dict)

    def add(self, txn: Transaction):
        if txn.txn_id in self.transactions:
            raise DuplicateTxn(txn.txn_id)
        txn.validate()
        self.transactions[txn.txn_id] = txn

    @classmethod
    def of(cls, txns: Iterable[Transaction]) -> "History":
        h = cls()
        for txn in txns:
            h.add(txn)
        return h

    def __len__(self):
        return len(self.transactions)

    def __iter__(self) -> Iterator[Transaction]:
        return iter(self.transactions.values())

    def __contains__(self, txn_id):
        return txn_id in self.transactions

    def get(self, txn_id) -> Optional[Transaction]:
        return self.transactions.get(txn_id)

    @property
    def sessions(self) -> Dict[int, List[int]]:
        sessions: Dict[int, List[Tuple[int, int]]] = {}
        for txn in self.transactions.values():
            sessions.setdefault(txn.session_id, []).append((txn.seq, txn.txn_id))
        return {sid: [t for _, t in sorted(items)] for sid, items in sorted(sessions.items())}

    def write_index(self) -> Dict[int, Tuple[int, str]]:
        """Map every write id to its (writer txn, key); raises DuplicateWriteId."""
        index: Dict[int, Tuple[int, str]] = {}
        for txn in self.transactions.values():
            for key, wid in txn.writes.items():
                if wid in index:
                    raise DuplicateWriteId(wid)
                index[wid] = (txn.txn_id, key)
        return index

    def concat(self, other: "History") -> "History":
        return History.of(list(self) + list(other))

    def split(self, size: int) -> List["History"]:
        """Cut the history into fragments of at most `size` transactions, in commit order."""
        if size <= 0:
            raise ValueError("fragment size must be positive")
        txns = list(self)
        return [History.of(txns[i:i + size]) for i in range(0, len(txns), size)]


# --- Verdicts ---

class RejectReason(str, Enum):
    MULTIPLE_SUCCESSIVE_WRITES = "multiple-successive-writes"
    STALE_READ_OF_DELETED = "stale-read-of-deleted"
    KNOWN_CYCLE = "known-cycle"
    BOTH_SIDES_CONFLICT = "both-sides-conflict"
    UNSATISFIABLE = "unsatisfiable"
    UNRESOLVED_READ = "unresolved-read"
    MISDIRECTED_READ = "misdirected-read"


@dataclass
class Reject:
    reason: RejectReason
    cycles: List[List[int]] = field(default_factory=list)
    constraints: List[int] = field(default_factory=list)
    txns: List[int] = field(default_factory=list)
    detail: str = ""
    round: Optional[int] = None

    @property
    def accepted(self):
        return False

    def describe(self) -> List[str]:
        lines = [f"REJECT {self.reason.value}" + (f": {self.detail}" if self.detail else "")]
        for cycle in self.cycles:
            lines.append("cycle: " + " -> ".join(str(t) for t in cycle))
        if self.constraints:
            lines.append("blamed: " + " ".join(str(c) for c in self.constraints))
        return lines

    def to_dict(self):
        return {
            "verdict": "reject",
            "reason": self.reason.value,
            "detail": self.detail,
            "cycles": self.cycles,
            "constraints": self.constraints,
            "txns": self.txns,
            "round": self.round,
        }


@dataclass
class Accept:
    choices: List[int] = field(default_factory=list)
    edges: List[Edge] = field(default_factory=list)

    @property
    def accepted(self):
        return True

    def describe(self) -> List[str]:
        return ["ACCEPT"]

    def to_dict(self):
        return {"verdict": "accept", "choices": self.choices}


# --- Extended history ---

@dataclass
class Tombstones:
    txns: Set[int] = field(default_factory=set)
    write_ids: Set[int] = field(default_factory=set)
    keys: Set[str] = field(default_factory=set)

    def __len__(self):
        return len(self.txns)


@dataclass(eq=False)
class ExtendedHistory:
    """The verifier's accumulated state: known graph g, readfrom, wwpairs and live transactions."""
    graph: nx.DiGraph = field(default_factory=nx.DiGraph)
    readfrom: Dict[Tuple[str, int], Set[int]] = field(default_factory=dict)
    wwpairs: Dict[Tuple[str, int], int] = field(default_factory=dict)
    txns: Dict[int, Transaction] = field(default_factory=dict)
    writes: Dict[int, Tuple[int, str]] = field(default_factory=dict)
    sessions: Dict[int, List[int]] = field(default_factory=dict)
    tombstones: Tombstones = field(default_factory=Tombstones)

    def __len__(self):
        return len(self.txns)

    def __eq__(self, other):
        if not isinstance(other, ExtendedHistory):
            return NotImplemented
        return (
            set(self.graph.nodes) == set(other.graph.nodes)
            and set(self.graph.edges(data="kind")) == set(other.graph.edges(data="kind"))
            and self.readfrom == other.readfrom
            and self.wwpairs == other.wwpairs
            and self.txns == other.txns
            and self.writes == other.writes
            and self.sessions == other.sessions
            and self.tombstones == other.tombstones
        )

    def add_edge(self, u, v, kind):
        """Add a known edge unless it already exists; the first kind recorded wins."""
        if kind not in EDGE_KINDS:
            raise InternalInvariantViolation(f"unknown edge kind {kind!r}")
        if u == v:
            raise InternalInvariantViolation(f"self-loop on {u}")
        if not self.graph.has_edge(u, v):
            self.graph.add_edge(u, v, kind=kind)
            return True
        return False

    def add_session_entry(self, txn: Transaction):
        entries = self.sessions.setdefault(txn.session_id, [])
        if not entries or self.txns[entries[-1]].seq < txn.seq:
            entries.append(txn.txn_id)
            return
        seqs = [self.txns[t].seq for t in entries]
        entries.insert(bisect.bisect(seqs, txn.seq), txn.txn_id)

    def writers_by_key(self) -> Dict[str, List[int]]:
        writers: Dict[str, List[int]] = {}
        for txn_id, key in self.writes.values():
            writers.setdefault(key, []).append(txn_id)
        return {k: sorted(v) for k, v in sorted(writers.items())}

    def resolve(self, key, write_id) -> Optional[int]:
        """Return the live writer of write_id on key (INIT_TXN for 0), or None if unknown."""
        if write_id == INIT_WRITE:
            return INIT_TXN
        found = self.writes.get(write_id)
        if found is None:
            return None
        return found[0]


def merge_fragment(acc: ExtendedHistory, frag: History, session_order=True):
    """
    Absorb a continuation fragment into the extended history.

    Every read of the fragment must resolve to a write that is live in `acc`,
    part of the fragment, tombstoned, or the initial value.

    Returns:
        The extended history (mutated in place), or a Reject.

    Raises:
        UnresolvedRead: a read references an unknown, non-tombstoned write.
    """
    from verifier_graph import create_known_graph

    known = set(acc.writes) | acc.tombstones.write_ids
    known.update(wid for txn in frag for wid in txn.writes.values())
    for txn in frag:
        for key, wid in txn.reads.items():
            if wid != INIT_WRITE and wid not in known:
                raise UnresolvedRead(txn.txn_id, key, wid)
    return create_known_graph(acc, frag, session_order=session_order)
