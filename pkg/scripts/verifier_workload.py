"""
Seeded workload simulator and anomaly injector.

The simulator stands in for the database under test: it interleaves
client sessions into one serial order and executes them against a
single-copy store, so every generated history is strong-session
serializable by construction.
"""
import copy
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from verifier_history import (
    EPOCH_KEY,
    INIT_WRITE,
    History,
    Operation,
    Transaction,
    VerifierError,
)

logger = logging.getLogger("Verifier")


class Benchmark(str, Enum):
    BLINDW_RW = "blindw-rw"
    BLINDW_RM = "blindw-rm"
    RMW_ONLY = "rmw-only"
    READ_HEAVY = "read-heavy"


class AnomalyKind(str, Enum):
    STALE_READ = "stale-read"
    LOST_UPDATE = "lost-update"
    WRITE_CYCLE = "write-cycle"
    SESSION_ORDER_VIOLATION = "session-order-violation"
    FUTURE_READ_ACROSS_EPOCHS = "future-read-across-epochs"


class PatternNotApplicable(VerifierError):
    def __init__(self, kind, reason):
        self.kind = kind
        super().__init__(f"cannot inject {kind.value}: {reason}")


# Fraction of all-read transactions per BlindW variant
READ_ONLY_FRACTION = {Benchmark.BLINDW_RW: 0.5, Benchmark.BLINDW_RM: 0.9}
READ_HEAVY_READ_FRACTION = 0.9


class WorkloadConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    benchmark: Benchmark = Benchmark.BLINDW_RW
    num_sessions: int = Field(default=4, ge=1)
    txns_per_session: int = Field(default=10, ge=0)
    total_txns: Optional[int] = Field(default=None, ge=0)
    keys: int = Field(default=100, ge=1)
    ops_per_txn: int = Field(default=8, ge=1)
    fence_every: int = Field(default=20, ge=0)
    read_fence_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0, lt=1 << 64)

    def session_sizes(self) -> List[int]:
        if self.total_txns is None:
            return [self.txns_per_session] * self.num_sessions
        base, extra = divmod(self.total_txns, self.num_sessions)
        return [base + (1 if i < extra else 0) for i in range(self.num_sessions)]


def make_txn_id(session_id: int, seq: int) -> int:
    return (session_id << 32) | seq


class _Simulator:
    """Single-copy store plus id counters shared by generate and inject."""

    def __init__(self, rng: random.Random, next_write: int = 1):
        self.rng = rng
        self.store: Dict[str, int] = {}
        self.next_write = next_write

    def new_write(self) -> int:
        wid = self.next_write
        self.next_write += 1
        return wid

    def execute(self, txn_id, session_id, seq, plan: List[Tuple[str, str]], is_fence=False) -> Transaction:
        ops = []
        for kind, key in plan:
            if kind == "r":
                ops.append(Operation.read(key, self.store.get(key, INIT_WRITE)))
            else:
                wid = self.new_write()
                ops.append(Operation.write(key, wid))
        # writes become visible at commit
        for op in ops:
            if op.kind.value == "w":
                self.store[op.key] = op.write_id
        return Transaction(txn_id, session_id, seq, ops, is_fence=is_fence)


def _plan(cfg: WorkloadConfig, rng: random.Random) -> List[Tuple[str, str]]:
    n = min(cfg.ops_per_txn, cfg.keys)
    if cfg.benchmark in (Benchmark.BLINDW_RW, Benchmark.BLINDW_RM):
        keys = rng.sample(range(cfg.keys), n)
        kind = "r" if rng.random() < READ_ONLY_FRACTION[cfg.benchmark] else "w"
        return [(kind, f"k{k}") for k in keys]
    if cfg.benchmark == Benchmark.RMW_ONLY:
        count = max(1, min(cfg.ops_per_txn // 2, cfg.keys))
        plan = []
        for k in rng.sample(range(cfg.keys), count):
            plan.append(("r", f"k{k}"))
            plan.append(("w", f"k{k}"))
        return plan
    keys = rng.sample(range(cfg.keys), n)
    return [("r" if rng.random() < READ_HEAVY_READ_FRACTION else "w", f"k{k}") for k in keys]


def generate(cfg: WorkloadConfig) -> History:
    """
    Generate a strong-session serializable history for cfg, deterministic in cfg.seed.

    A fence transaction on EPOCH follows every `fence_every` normal
    transactions of a session; a `read_fence_fraction` of them only read it.
    """
    rng = random.Random(cfg.seed)
    sim = _Simulator(rng)
    remaining = {sid: size for sid, size in enumerate(cfg.session_sizes(), start=1) if size > 0}
    next_seq = {sid: 0 for sid in remaining}
    normal_done = {sid: 0 for sid in remaining}
    history = History()

    while remaining:
        sid = rng.choice(sorted(remaining))
        seq = next_seq[sid]
        history.add(sim.execute(make_txn_id(sid, seq), sid, seq, _plan(cfg, rng)))
        next_seq[sid] += 1
        normal_done[sid] += 1
        remaining[sid] -= 1
        if remaining[sid] == 0:
            del remaining[sid]
        if cfg.fence_every and normal_done[sid] % cfg.fence_every == 0:
            seq = next_seq[sid]
            plan = [("r", EPOCH_KEY)]
            if rng.random() >= cfg.read_fence_fraction:
                plan.append(("w", EPOCH_KEY))
            history.add(sim.execute(make_txn_id(sid, seq), sid, seq, plan, is_fence=True))
            next_seq[sid] += 1

    logger.info(
        f"Generated {len(history)} transactions ({cfg.benchmark.value}, "
        f"{cfg.num_sessions} sessions, seed {cfg.seed})"
    )
    return history


def random_history(
    seed: int,
    max_txns: int = 8,
    max_sessions: int = 3,
    max_keys: int = 3,
    fences: bool = False,
    serial_fraction: float = 0.5,
) -> History:
    """
    A small random history for cross-checking against the oracle. About
    `serial_fraction` of them are executed serially (and so serializable);
    the rest read arbitrary writes of the right key.
    """
    rng = random.Random(seed)
    n_txns = rng.randint(1, max_txns)
    n_sessions = rng.randint(1, max_sessions)
    n_keys = rng.randint(1, max_keys)
    keys = [f"k{i}" for i in range(n_keys)]

    plans = []
    next_seq = {sid: 0 for sid in range(1, n_sessions + 1)}
    for _ in range(n_txns):
        sid = rng.randint(1, n_sessions)
        seq = next_seq[sid]
        next_seq[sid] += 1
        if fences and rng.random() < 0.25:
            plan = [("r", EPOCH_KEY)]
            if rng.random() < 0.8:
                plan.append(("w", EPOCH_KEY))
            plans.append((sid, seq, plan, True))
            continue
        touched = rng.sample(keys, rng.randint(1, n_keys))
        plan = []
        for key in touched:
            shape = rng.choice(("r", "w", "rw"))
            if "r" in shape:
                plan.append(("r", key))
            if "w" in shape:
                plan.append(("w", key))
        plan.sort(key=lambda p: p[0] != "r")
        plans.append((sid, seq, plan, False))

    sim = _Simulator(rng)
    if rng.random() < serial_fraction:
        history = History()
        for sid, seq, plan, is_fence in plans:
            history.add(sim.execute(make_txn_id(sid, seq), sid, seq, plan, is_fence))
        return history

    # Assign write ids first, then let reads pick any write of the key.
    txns = []
    by_key: Dict[str, List[Tuple[int, int]]] = {}
    for sid, seq, plan, is_fence in plans:
        txn_id = make_txn_id(sid, seq)
        ops = []
        for kind, key in plan:
            if kind == "w":
                wid = sim.new_write()
                ops.append(Operation.write(key, wid))
                by_key.setdefault(key, []).append((txn_id, wid))
            else:
                ops.append(Operation.read(key, INIT_WRITE))
        txns.append(Transaction(txn_id, sid, seq, ops, is_fence))
    for txn in txns:
        for i, op in enumerate(txn.ops):
            if op.kind.value == "r":
                options = [INIT_WRITE] + [w for t, w in by_key.get(op.key, []) if t != txn.txn_id]
                txn.ops[i] = Operation.read(op.key, rng.choice(options))
    return History.of(txns)


# --- Anomaly injection ---

@dataclass
class Injection:
    history: History
    kind: AnomalyKind
    log: List[str] = field(default_factory=list)
    appended: List[int] = field(default_factory=list)


class _Injector:
    def __init__(self, h: History, kind: AnomalyKind, seed):
        self.h = History.of(copy.deepcopy(list(h)))
        self.kind = kind
        self.rng = random.Random(seed)
        self.log: List[str] = []
        self.appended: List[int] = []
        self.index = self.h.write_index()
        self.next_write = max(self.index, default=0) + 1
        self.next_session = max((t.session_id for t in self.h), default=0) + 1
        self.fresh = 0

    def new_write(self):
        wid = self.next_write
        self.next_write += 1
        return wid

    def fresh_key(self, name):
        self.fresh += 1
        return f"inj{self.fresh}_{name}"

    def new_session(self) -> int:
        sid = self.next_session
        self.next_session += 1
        return sid

    def append(self, sid, seq, ops) -> Transaction:
        txn = Transaction(make_txn_id(sid, seq), sid, seq, ops)
        self.h.add(txn)
        self.appended.append(txn.txn_id)
        return txn

    def normal(self) -> List[Transaction]:
        return [t for t in self.h if not t.is_fence]

    def rewrite_read(self, txn: Transaction, key, wid):
        for i, op in enumerate(txn.ops):
            if op.kind.value == "r" and op.key == key:
                old = op.write_id
                txn.ops[i] = Operation.read(key, wid)
                self.log.append(f"txn {txn.txn_id}: read of {key} rewritten from write {old} to {wid}")
                return
        raise PatternNotApplicable(self.kind, f"txn {txn.txn_id} does not read {key}")

    def add_read_first(self, txn: Transaction, key, wid):
        txn.ops.insert(0, Operation.read(key, wid))
        self.log.append(f"txn {txn.txn_id}: added read of {key} from write {wid}")

    def rmw_pairs(self) -> List[Tuple[Transaction, Transaction, str]]:
        """(A, B, key) where normal txn B read-modify-writes key from normal txn A."""
        pairs = []
        for b in self.normal():
            writes = b.writes
            for key, wid in b.reads.items():
                if key in writes and wid != INIT_WRITE:
                    a = self.h.get(self.index[wid][0])
                    pairs.append((a, b, key))
        return pairs

    # stale read: R reads k from A although B overwrote A and R depends on B
    def stale_read(self):
        candidates = []
        for a, b, key in self.rmw_pairs():
            b_writes = {wid: k for k, wid in b.writes.items() if k != key}
            for r in self.normal():
                if r.txn_id in (a.txn_id, b.txn_id) or key not in r.reads or key in r.writes:
                    continue
                if any(wid in b_writes for wid in r.reads.values()):
                    candidates.append((a, b, r, key))
        if candidates:
            a, b, r, key = self.rng.choice(candidates)
            self.rewrite_read(r, key, a.writes[key])
            return
        x, y = self.fresh_key("x"), self.fresh_key("y")
        sid = self.new_session()
        wa = self.new_write()
        self.append(sid, 0, [Operation.write(x, wa)])
        wb_x, wb_y = self.new_write(), self.new_write()
        self.append(sid, 1, [Operation.read(x, wa), Operation.write(x, wb_x), Operation.write(y, wb_y)])
        self.append(self.new_session(), 0, [Operation.read(x, wa), Operation.read(y, wb_y)])
        self.log.append(f"appended stale-read pattern on {x}, {y}")

    # lost update: two read-modify-writes of the same write
    def lost_update(self):
        candidates = []
        for a, b, key in self.rmw_pairs():
            for c in self.normal():
                if c.txn_id in (a.txn_id, b.txn_id) or key not in c.reads or key in c.writes:
                    continue
                candidates.append((a, c, key))
        if candidates:
            a, c, key = self.rng.choice(candidates)
            self.rewrite_read(c, key, a.writes[key])
            wid = self.new_write()
            c.ops.append(Operation.write(key, wid))
            self.log.append(f"txn {c.txn_id}: added write of {key} ({wid})")
            return
        x = self.fresh_key("x")
        w0 = self.new_write()
        self.append(self.new_session(), 0, [Operation.write(x, w0)])
        self.append(self.new_session(), 0, [Operation.read(x, w0), Operation.write(x, self.new_write())])
        self.append(self.new_session(), 0, [Operation.read(x, w0), Operation.write(x, self.new_write())])
        self.log.append(f"appended lost-update pattern on {x}")

    # write cycle: X and Y each read the other's write
    def write_cycle(self):
        txns = [t for t in self.normal() if t.writes]
        self.rng.shuffle(txns)
        for i, x in enumerate(txns):
            for y in txns[i + 1:]:
                kx = next(((k, w) for k, w in sorted(x.writes.items()) if not y.touches(k)), None)
                ky = next(((k, w) for k, w in sorted(y.writes.items()) if not x.touches(k)), None)
                if kx and ky:
                    self.add_read_first(x, *ky)
                    self.add_read_first(y, *kx)
                    return
        a, b = self.fresh_key("a"), self.fresh_key("b")
        wa, wb = self.new_write(), self.new_write()
        self.append(self.new_session(), 0, [Operation.read(b, wb), Operation.write(a, wa)])
        self.append(self.new_session(), 0, [Operation.read(a, wa), Operation.write(b, wb)])
        self.log.append(f"appended write-cycle pattern on {a}, {b}")

    # session order violation: a txn reads from its own session successor
    def session_order_violation(self):
        candidates = []
        for entries in self.h.sessions.values():
            for s1_id, s2_id in zip(entries, entries[1:]):
                s1, s2 = self.h.get(s1_id), self.h.get(s2_id)
                if s1.is_fence or s2.is_fence:
                    continue
                for key, wid in sorted(s2.writes.items()):
                    if not s1.touches(key):
                        candidates.append((s1, key, wid))
                        break
        if candidates:
            s1, key, wid = self.rng.choice(candidates)
            self.add_read_first(s1, key, wid)
            return
        k, j = self.fresh_key("k"), self.fresh_key("j")
        sid = self.new_session()
        wk = self.new_write()
        self.append(sid, 0, [Operation.read(k, wk), Operation.write(j, self.new_write())])
        self.append(sid, 1, [Operation.write(k, wk)])
        self.log.append(f"appended session-order pattern on {k}")

    # T4 reads x from T1 (overwritten by RMW T2) and y from T3, where T3 is T2 or follows it in its session
    def future_read(self):
        candidates = []
        sessions = self.h.sessions
        for t1, t2, x in self.rmw_pairs():
            later = [t2] + [
                self.h.get(t) for t in sessions[t2.session_id]
                if self.h.get(t).seq > t2.seq and not self.h.get(t).is_fence
            ]
            for t3 in later:
                ys = [(k, w) for k, w in sorted(t3.writes.items()) if k != x]
                if ys:
                    candidates.append((t1, t2, t3, x, ys[0]))
                    break
        if candidates:
            t1, t2, t3, x, (y, wy) = self.rng.choice(candidates)
            txn = self.append(self.new_session(), 0, [Operation.read(x, t1.writes[x]), Operation.read(y, wy)])
            self.log.append(
                f"appended txn {txn.txn_id} reading {x} from {t1.txn_id} (overwritten by {t2.txn_id}) "
                f"and {y} from {t3.txn_id}"
            )
            return
        x, y = self.fresh_key("x"), self.fresh_key("y")
        w1 = self.new_write()
        self.append(self.new_session(), 0, [Operation.write(x, w1)])
        sid = self.new_session()
        self.append(sid, 0, [Operation.read(x, w1), Operation.write(x, self.new_write())])
        w3 = self.new_write()
        self.append(sid, 1, [Operation.write(y, w3)])
        self.append(self.new_session(), 0, [Operation.read(x, w1), Operation.read(y, w3)])
        self.log.append(f"appended future-read pattern on {x}, {y}")


_INJECTORS = {
    AnomalyKind.STALE_READ: _Injector.stale_read,
    AnomalyKind.LOST_UPDATE: _Injector.lost_update,
    AnomalyKind.WRITE_CYCLE: _Injector.write_cycle,
    AnomalyKind.SESSION_ORDER_VIOLATION: _Injector.session_order_violation,
    AnomalyKind.FUTURE_READ_ACROSS_EPOCHS: _Injector.future_read,
}


def inject(h: History, kind: AnomalyKind, seed=0, allow_append: bool = True) -> Injection:
    """
    Return a copy of h exhibiting the anomaly. Existing structure is mutated
    when the history has it; otherwise the pattern is appended on fresh keys
    in new sessions.

    Raises:
        PatternNotApplicable: no suitable structure and allow_append is False.
    """
    injector = _Injector(h, kind, seed)
    if not allow_append:
        injector.append = _refuse(kind)
    _INJECTORS[kind](injector)
    for txn in injector.h:
        txn.validate()
    logger.info(f"Injected {kind.value}: {'; '.join(injector.log)}")
    return Injection(injector.h, kind, injector.log, injector.appended)


def _refuse(kind):
    def append(*_args, **_kwargs):
        raise PatternNotApplicable(kind, "history lacks the needed structure")
    return append
