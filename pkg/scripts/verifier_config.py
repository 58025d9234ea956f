import os
import logging
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

# Load .env file
load_dotenv(os.path.join(os.path.dirname(__file__), ".env"))

logger = logging.getLogger("Verifier")

CLOSURE_STRATEGIES = ("auto", "bfs", "propagate", "squaring")


def _env_int(name, default):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer {name}={raw!r}, using {default}")
        return default


def _env_float(name):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        return float(raw)
    except ValueError:
        logger.warning(f"Ignoring non-numeric {name}={raw!r}")
        return None


def _env_time_budget():
    """COBRA_TIME_BUDGET_SECS, with TIME_BUDGET_SECS accepted as an alias."""
    for name in ("COBRA_TIME_BUDGET_SECS", "TIME_BUDGET_SECS"):
        value = _env_float(name)
        if value is not None:
            return value
    return None


class VerifierConfig:
    """Configuration for the history verifier."""

    # Solver
    TIME_BUDGET_SECS = _env_time_budget()

    # Pruning / closure
    MAX_PRUNE_ITERS = _env_int("MAX_PRUNE_ITERS", 10)
    CLOSURE_STRATEGY = os.getenv("CLOSURE_STRATEGY", "auto")
    CLOSURE_BFS_THRESHOLD = _env_int("CLOSURE_BFS_THRESHOLD", 512)

    # Streaming rounds
    DEFERRED_LIMIT = _env_int("DEFERRED_LIMIT", 10000)
    PREFETCH_ROUNDS = _env_int("PREFETCH_ROUNDS", 2)

    # Oracle bounds
    ORACLE_MAX_TXNS = _env_int("ORACLE_MAX_TXNS", 9)
    ORACLE_MAX_CONSTRAINTS = _env_int("ORACLE_MAX_CONSTRAINTS", 20)

    # Paths
    BASE_DIR = os.path.dirname(os.path.abspath(__file__))
    PARENT_DIR = os.path.dirname(BASE_DIR)
    LOG_DIR = os.getenv("LOG_DIR", os.path.join(PARENT_DIR, "logs"))
    LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")

    @classmethod
    def validate(cls):
        """Validate configuration, falling back to defaults for unusable values."""
        if cls.CLOSURE_STRATEGY not in CLOSURE_STRATEGIES:
            logger.warning(f"Unknown CLOSURE_STRATEGY {cls.CLOSURE_STRATEGY!r}, using 'auto'")
            cls.CLOSURE_STRATEGY = "auto"
        if cls.MAX_PRUNE_ITERS < 0:
            logger.warning("MAX_PRUNE_ITERS must be >= 0, using 10")
            cls.MAX_PRUNE_ITERS = 10
        if cls.TIME_BUDGET_SECS is not None and cls.TIME_BUDGET_SECS <= 0:
            logger.warning("COBRA_TIME_BUDGET_SECS must be positive, ignoring it")
            cls.TIME_BUDGET_SECS = None
        if cls.DEFERRED_LIMIT < 0:
            logger.warning("DEFERRED_LIMIT must be >= 0, using 10000")
            cls.DEFERRED_LIMIT = 10000
        if cls.PREFETCH_ROUNDS < 1:
            logger.warning("PREFETCH_ROUNDS must be >= 1, using 2")
            cls.PREFETCH_ROUNDS = 2
        if logging.getLevelName(str(cls.LOG_LEVEL).upper()) not in (
            logging.DEBUG, logging.INFO, logging.WARNING, logging.ERROR, logging.CRITICAL
        ):
            cls.LOG_LEVEL = "WARNING"

    @classmethod
    def options(cls, **overrides):
        """
        Build the per-invocation options, with explicit overrides winning over
        environment values.

        Args:
            **overrides: any VerifyOptions field; None values are ignored

        Returns:
            VerifyOptions
        """
        opts = VerifyOptions(
            max_prune_iters=cls.MAX_PRUNE_ITERS,
            time_budget=cls.TIME_BUDGET_SECS,
            closure_strategy=cls.CLOSURE_STRATEGY,
            bfs_threshold=cls.CLOSURE_BFS_THRESHOLD,
            deferred_limit=cls.DEFERRED_LIMIT,
        )
        for name, value in overrides.items():
            if not hasattr(opts, name):
                raise TypeError(f"Unknown verifier option: {name}")
            if value is not None:
                setattr(opts, name, value)
        return opts


@dataclass
class VerifyOptions:
    session_order: bool = True
    prune: bool = True
    max_prune_iters: int = 10
    time_budget: Optional[float] = None
    closure_strategy: str = "auto"
    bfs_threshold: int = 512
    deferred_limit: int = 10000
    gc: bool = True
