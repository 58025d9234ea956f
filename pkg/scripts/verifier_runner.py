"""
Command-line entry point.

    python verifier_runner.py gen --benchmark blindw-rw --sessions 4 --txns 200 --keys 50 --seed 7 --out h.txt
    python verifier_runner.py verify h.txt
    python verifier_runner.py verify-rounds --dir fragments/ --round-size 100 --checkpoint state.ckpt
    python verifier_runner.py stats h.txt

Exit codes: 0 accept, 1 reject, 2 time or buffer budget exceeded, 64 usage,
65 malformed history data, 74 I/O error.
"""
import argparse
import asyncio
import json
import logging
import os
import sys
from contextlib import aclosing
from itertools import islice
from logging.handlers import RotatingFileHandler
from typing import Iterator, List, Optional

from pydantic import ValidationError
from tenacity import retry, retry_if_exception, stop_after_attempt, wait_exponential

from verifier_codec import decode_lines, parse, read_history, serialize_in_order, write_history
from verifier_config import CLOSURE_STRATEGIES, VerifierConfig
from verifier_history import CheckpointError, DeferredBufferOverflow, History, HistoryError, Transaction
from verifier_rounds import (
    RoundVerifier,
    history_stats,
    load_checkpoint,
    save_checkpoint,
    verify_history,
    verify_rounds_async,
)
from verifier_solver import TimeBudgetExceeded, export
from verifier_workload import AnomalyKind, Benchmark, WorkloadConfig, generate, inject

EXIT_ACCEPT = 0
EXIT_REJECT = 1
EXIT_BUDGET = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_IO = 74

logger = logging.getLogger("Verifier")


def setup_logging(log_dir=None, level=None):
    """
    Attach a rotating debug log file and a console handler on stderr.

    Args:
        log_dir: directory for verifier_debug.log (defaults to LOG_DIR)
        level: console level name (defaults to LOG_LEVEL)
    """
    log_dir = log_dir or VerifierConfig.LOG_DIR
    level = (level or VerifierConfig.LOG_LEVEL).upper()

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.setLevel(logging.DEBUG)

    formatter = logging.Formatter('%(asctime)s [%(levelname)s] %(message)s')

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    log_file = os.path.join(log_dir, "verifier_debug.log")
    try:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=20 * 1024 * 1024,  # 20 MB
            backupCount=5,
            encoding='utf-8'
        )
    except OSError as e:
        logger.warning(f"File logging disabled ({e})")
        return logger
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)
    logger.debug(f"Logging to: {log_file}")
    return logger


def io_retry_predicate(exception):
    """Retry transient OS errors; missing files and permission problems are final."""
    if isinstance(exception, (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError)):
        return False
    if isinstance(exception, OSError):
        logger.warning(f"[Retry Trigger] I/O error: {exception}")
        return True
    return False


io_retry = retry(
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    stop=stop_after_attempt(3),
    retry=retry_if_exception(io_retry_predicate),
    reraise=True
)


@io_retry
def _read_history(path) -> History:
    return read_history(path)


@io_retry
def _read_lines(path) -> List[str]:
    with open(path, "rb") as f:
        return list(decode_lines(f.read().splitlines()))


@io_retry
def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


@io_retry
def _write_history(h, path):
    write_history(h, path)


@io_retry
def _save_checkpoint(verifier, path):
    tmp = f"{path}.tmp"
    save_checkpoint(verifier, tmp)
    os.replace(tmp, path)


class VerifierArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with EX_USAGE instead of argparse's 2, which means budget exceeded here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _session_list(text):
    try:
        return sorted({int(part) for part in text.split(",") if part.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated session ids, got {text}")


def build_parser() -> VerifierArgumentParser:
    parser = VerifierArgumentParser(prog="verifier", description="Serializability verifier for transaction histories")
    parser.add_argument("--log-dir", default=None, help="Directory for the debug log (defaults to LOG_DIR)")
    parser.add_argument("--log-level", default=None, help="Console log level (defaults to LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a simulated history")
    gen.add_argument("--benchmark", choices=[b.value for b in Benchmark], default=Benchmark.BLINDW_RW.value)
    gen.add_argument("--sessions", type=_positive_int, default=4)
    gen.add_argument("--txns", type=int, default=100, help="Total normal transactions over all sessions")
    gen.add_argument("--keys", type=_positive_int, default=100)
    gen.add_argument("--ops", type=_positive_int, default=8, help="Operations per transaction")
    gen.add_argument("--fence-every", type=int, default=20, help="Normal transactions between fences (0 disables)")
    gen.add_argument("--read-fence-fraction", type=float, default=0.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--inject", choices=[k.value for k in AnomalyKind], default=None)
    gen.add_argument("--out", default=None, help="History file (canonical order)")
    gen.add_argument("--fragments", default=None, help="Directory for fragment files in commit order")
    gen.add_argument("--round-size", type=_positive_int, default=100, help="Transactions per fragment file")

    verify = sub.add_parser("verify", help="Verify a history file in one shot")
    verify.add_argument("file")
    verify.add_argument("--no-session-order", action="store_true", help="Check plain serializability")
    verify.add_argument("--no-prune", action="store_true")
    verify.add_argument("--max-prune-iters", type=int, default=None)
    verify.add_argument("--time-budget", type=_positive_float, default=None, help="Seconds (falls back to COBRA_TIME_BUDGET_SECS)")
    verify.add_argument("--closure", choices=CLOSURE_STRATEGIES, default=None)
    verify.add_argument("--export-instance", default=None, help="Write the solver instance to this file")
    verify.add_argument("--json", action="store_true")

    rounds = sub.add_parser("verify-rounds", help="Verify a directory of fragments round by round")
    rounds.add_argument("--dir", required=True)
    rounds.add_argument("--round-size", type=_positive_int, required=True)
    rounds.add_argument("--checkpoint", default=None, help="Resume from and update this checkpoint file")
    rounds.add_argument("--no-gc", action="store_true", help="Keep every transaction")
    rounds.add_argument(
        "--expected-sessions", type=_session_list, default=None,
        help="Comma-separated client ids; deletion waits for a fence from each",
    )
    rounds.add_argument("--no-prune", action="store_true")
    rounds.add_argument("--time-budget", type=_positive_float, default=None)
    rounds.add_argument("--json", action="store_true")

    stats = sub.add_parser("stats", help="Print constraint accounting for a history file")
    stats.add_argument("file")
    stats.add_argument("--json", action="store_true")
    return parser


def _emit(lines):
    for line in lines:
        print(line)


def cmd_gen(args) -> int:
    if not args.out and not args.fragments:
        print("gen: one of --out or --fragments is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = WorkloadConfig(
            benchmark=args.benchmark,
            num_sessions=args.sessions,
            total_txns=args.txns,
            keys=args.keys,
            ops_per_txn=args.ops,
            fence_every=args.fence_every,
            read_fence_fraction=args.read_fence_fraction,
            seed=args.seed,
        )
    except ValidationError as e:
        print(f"gen: invalid workload: {e}", file=sys.stderr)
        return EXIT_USAGE
    h = generate(cfg)
    if args.inject:
        injection = inject(h, AnomalyKind(args.inject), seed=args.seed)
        h = injection.history
    if args.out:
        _write_history(h, args.out)
    if args.fragments:
        os.makedirs(args.fragments, exist_ok=True)
        for i, frag in enumerate(h.split(args.round_size)):
            _write_text(os.path.join(args.fragments, f"fragment_{i:05d}.txt"), serialize_in_order(frag))
    logger.info(f"Wrote {len(h)} transactions")
    return EXIT_ACCEPT


def cmd_verify(args) -> int:
    h = _read_history(args.file)
    options = VerifierConfig.options(
        session_order=not args.no_session_order,
        prune=not args.no_prune,
        max_prune_iters=args.max_prune_iters,
        time_budget=args.time_budget,
        closure_strategy=args.closure,
    )
    result = verify_history(h, options)
    if args.export_instance:
        if result.instance is None:
            logger.warning("No solver instance to export: rejected before encoding")
        else:
            _write_text(args.export_instance, export(result.instance))
    if args.json:
        data = result.verdict.to_dict()
        data["stats"] = result.stats.to_dict()
        if result.schedule is not None:
            data["schedule"] = result.schedule
        print(json.dumps(data, sort_keys=True))
    else:
        _emit(result.verdict.describe())
    return EXIT_ACCEPT if result.accepted else EXIT_REJECT


def _stream_txns(directory) -> Iterator[Transaction]:
    names = sorted(n for n in os.listdir(directory) if os.path.isfile(os.path.join(directory, n)))
    for name in names:
        yield from parse(_read_lines(os.path.join(directory, name)))


def _rounds(directory, size, skip) -> Iterator[History]:
    txns = _stream_txns(directory)
    index = 0
    while True:
        chunk = list(islice(txns, size))
        if not chunk:
            return
        if index >= skip:
            yield History.of(chunk)
        index += 1


async def _drive_rounds(args, verifier) -> int:
    fragments = _rounds(args.dir, args.round_size, verifier.round)
    stream = verify_rounds_async(fragments, verifier=verifier, prefetch=VerifierConfig.PREFETCH_ROUNDS)
    async with aclosing(stream):
        async for result in stream:
            if args.json:
                print(json.dumps(result.to_dict(), sort_keys=True))
            else:
                _emit(result.describe())
            if not result.accepted:
                return EXIT_REJECT
            if args.checkpoint:
                await asyncio.to_thread(_save_checkpoint, verifier, args.checkpoint)
    return EXIT_ACCEPT


def cmd_verify_rounds(args) -> int:
    if not os.path.isdir(args.dir):
        print(f"verify-rounds: {args.dir} is not a directory", file=sys.stderr)
        return EXIT_IO
    options = VerifierConfig.options(
        gc=not args.no_gc,
        prune=not args.no_prune,
        time_budget=args.time_budget,
    )
    if args.checkpoint and os.path.exists(args.checkpoint):
        verifier = load_checkpoint(args.checkpoint, options, args.expected_sessions)
    else:
        verifier = RoundVerifier(options, args.expected_sessions)

    status = asyncio.run(_drive_rounds(args, verifier))
    if status == EXIT_ACCEPT:
        logger.info(f"All rounds accepted; live set high-water mark {verifier.live_high_water}")
    return status


def cmd_stats(args) -> int:
    h = _read_history(args.file)
    stats, rejected = history_stats(h, VerifierConfig.options())
    data = stats.to_dict()
    data["verdict"] = "reject" if rejected is not None else "undecided"
    if rejected is not None:
        data["reason"] = rejected.reason.value
    if args.json:
        print(json.dumps(data, sort_keys=True))
        return EXIT_ACCEPT
    for name, value in data.items():
        if name == "chains_per_key":
            value = " ".join(f"{k}:{v}" for k, v in value.items())
        print(f"{name}: {value}")
    return EXIT_ACCEPT


COMMANDS = {
    "gen": cmd_gen,
    "verify": cmd_verify,
    "verify-rounds": cmd_verify_rounds,
    "stats": cmd_stats,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run the subcommand and map errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    VerifierConfig.validate()
    setup_logging(args.log_dir, args.log_level)
    try:
        return COMMANDS[args.command](args)
    except TimeBudgetExceeded as e:
        print(f"BUDGET EXCEEDED: {e}")
        return EXIT_BUDGET
    except DeferredBufferOverflow as e:
        print(f"BUDGET EXCEEDED: {e}")
        return EXIT_BUDGET
    except (HistoryError, CheckpointError) as e:
        logger.error(f"Malformed input: {e}")
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
