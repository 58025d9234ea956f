"""
Line-oriented history format.

One transaction per line:

    T <txn_id> <session_id> <seq> <commit|abort> <fence|norm> <op>*

where each op is `w:<key>:<write_id>` or `r:<key>:<write_id>`. Aborted
transactions are kept in files but dropped at parse time.
"""
import logging
from typing import Iterable, Iterator, Union

from verifier_history import (
    DuplicateTxn,
    DuplicateWriteId,
    History,
    HistorySyntaxError,
    OpKind,
    Operation,
    Transaction,
)

logger = logging.getLogger("Verifier")

MAX_U64 = (1 << 64) - 1
MAX_U32 = (1 << 32) - 1


def _parse_uint(token, line_no, what, limit=MAX_U64):
    if not (token.isascii() and token.isdigit()):
        raise HistorySyntaxError(line_no, f"{what} {token!r} is not an unsigned integer")
    value = int(token)
    if value > limit:
        raise HistorySyntaxError(line_no, f"{what} {token} out of range")
    return value


def _parse_op(token, line_no):
    parts = token.split(":")
    if len(parts) != 3:
        raise HistorySyntaxError(line_no, f"malformed operation {token!r}")
    kind, key, wid = parts
    if kind not in ("r", "w"):
        raise HistorySyntaxError(line_no, f"unknown operation kind {kind!r}")
    if not key:
        raise HistorySyntaxError(line_no, "empty key")
    return Operation(OpKind(kind), key, _parse_uint(wid, line_no, "write id"))


def parse_line(line: str, line_no: int = 1) -> Transaction:
    fields = line.split()
    if len(fields) < 6 or fields[0] != "T":
        raise HistorySyntaxError(line_no, "expected 'T <txn> <session> <seq> <status> <kind> <op>*'")
    txn_id = _parse_uint(fields[1], line_no, "transaction id")
    session_id = _parse_uint(fields[2], line_no, "session id", MAX_U32)
    seq = _parse_uint(fields[3], line_no, "sequence number")
    status, kind = fields[4], fields[5]
    if status not in ("commit", "abort"):
        raise HistorySyntaxError(line_no, f"unknown status {status!r}")
    if kind not in ("fence", "norm"):
        raise HistorySyntaxError(line_no, f"unknown transaction kind {kind!r}")
    ops = [_parse_op(tok, line_no) for tok in fields[6:]]
    return Transaction(
        txn_id=txn_id,
        session_id=session_id,
        seq=seq,
        ops=ops,
        is_fence=(kind == "fence"),
        committed=(status == "commit"),
    )


def parse(lines: Union[str, Iterable[str]]) -> History:
    """
    Parse history lines into a History of committed transactions.

    Args:
        lines: the file contents, or any iterable of lines

    Returns:
        History in file order

    Raises:
        HistorySyntaxError, DuplicateTxn, DuplicateWriteId, NonUniqueKeyAccess
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    history = History()
    seen_ids = set()
    write_ids = set()
    dropped = 0
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        txn = parse_line(line, line_no)
        if txn.txn_id in seen_ids:
            raise DuplicateTxn(txn.txn_id)
        seen_ids.add(txn.txn_id)
        if not txn.committed:
            dropped += 1
            continue
        for wid in txn.writes.values():
            if wid in write_ids:
                raise DuplicateWriteId(wid)
            write_ids.add(wid)
        history.add(txn)
    if dropped:
        logger.debug(f"Dropped {dropped} aborted transactions")
    return history


def format_txn(txn: Transaction) -> str:
    status = "commit" if txn.committed else "abort"
    kind = "fence" if txn.is_fence else "norm"
    ops = " ".join(f"{op.kind.value}:{op.key}:{op.write_id}" for op in txn.ops)
    line = f"T {txn.txn_id} {txn.session_id} {txn.seq} {status} {kind}"
    return f"{line} {ops}" if ops else line


def serialize(h: History) -> str:
    """Canonical text form: ordered by session id then sequence number."""
    ordered = sorted(h, key=lambda t: (t.session_id, t.seq, t.txn_id))
    return "".join(format_txn(txn) + "\n" for txn in ordered)


def serialize_in_order(h: History) -> str:
    """Text form in commit (insertion) order, for fragment files."""
    return "".join(format_txn(txn) + "\n" for txn in h)


def decode_lines(raw_lines: Iterable[bytes]) -> Iterator[str]:
    """Decode raw lines as UTF-8; a bad byte is a syntax error on its line."""
    for line_no, raw in enumerate(raw_lines, start=1):
        try:
            yield raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise HistorySyntaxError(line_no, f"invalid UTF-8 at byte {exc.start}") from exc


def read_history(path) -> History:
    with open(path, "rb") as f:
        return parse(decode_lines(f))


def write_history(h: History, path, canonical=True):
    text = serialize(h) if canonical else serialize_in_order(h)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
