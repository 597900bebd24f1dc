"""Logging setup, run directories and result files."""

import csv
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Any, Iterable, Sequence

from aepo_desk.errors import StorageError
from aepo_desk.rollout.engine import RolloutPool
from aepo_desk.rollout.entropy import build_trace

logger = logging.getLogger(__name__)

PACKAGE_LOGGER = "aepo_desk"
LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"


def setup_logging(command: str, run_dir: Path | None = None) -> Path:
    """Send debug-level package logs to a per-command file.

    Commands that own a run directory log to ``<run_dir>/logs/``; the others
    log to ``logs/`` under the working directory. A previous debug file
    handler is replaced, so each command writes exactly one log.

    Args:
        command: CLI command name, used as the filename prefix
        run_dir: Run directory of the command, if it has one

    Returns:
        Path to the debug log file
    """
    logs_dir = RunPaths(run_dir).logs if run_dir is not None else Path.cwd() / "logs"
    try:
        logs_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Failed to create log directory {logs_dir}: {e}") from e

    timestamp = datetime.now(timezone.utc).strftime("%Y-%m-%d-%H%M%S")
    log_path = logs_dir / f"{command}-{timestamp}.log"

    package_logger = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(package_logger.handlers):
        if isinstance(handler, logging.FileHandler):
            package_logger.removeHandler(handler)
            handler.close()

    file_handler = logging.FileHandler(log_path)
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    package_logger.addHandler(file_handler)
    package_logger.setLevel(logging.DEBUG)
    logger.debug(f"{command} started, logging to {log_path}")
    return log_path


@dataclass(frozen=True)
class RunPaths:
    """File layout of one run directory."""

    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.txt"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def pools(self) -> Path:
        return self.root / "pools"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def eval(self) -> Path:
        return self.root / "eval.json"

    @property
    def compare(self) -> Path:
        return self.root / "compare.csv"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def head_to_head(self) -> Path:
        return self.root / "head_to_head.json"

    def checkpoint(self, step: int) -> Path:
        return self.checkpoints / f"step-{step:06d}"

    def pool_dump(self, step: int) -> Path:
        return self.pools / f"step-{step:06d}.jsonl"

    def create(self) -> "RunPaths":
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            self.checkpoints.mkdir(exist_ok=True)
        except PermissionError:
            raise StorageError(f"Cannot create {self.root}: Permission denied.") from None
        except OSError as e:
            raise StorageError(f"Failed to create run directory {self.root}: {e}") from e
        return self

    def latest_checkpoint(self) -> Path | None:
        if not self.checkpoints.is_dir():
            return None
        found = sorted(p for p in self.checkpoints.glob("step-*") if p.is_dir())
        return found[-1] if found else None


class MetricsWriter:
    """Append-only JSONL writer.

    Each record is written and flushed as soon as it is produced, so a
    crashed run keeps every completed step.
    """

    def __init__(self, path: Path, truncate: bool = False):
        self.path = Path(path)
        self.count = 0
        try:
            self._file: IO[str] = open(self.path, "w" if truncate else "a")
        except OSError as e:
            raise StorageError(f"Failed to open metrics file {self.path}: {e}") from e

    def write(self, record: dict[str, Any]) -> None:
        try:
            self._file.write(json.dumps(record, sort_keys=True) + "\n")
            self._file.flush()
        except OSError as e:
            raise StorageError(f"Failed to write metrics file {self.path}: {e}") from e
        self.count += 1

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise StorageError(f"Failed to read {path}: {e}") from e
    records = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise StorageError(f"{path}:{line_number} is not valid JSON: {e}") from e
    return records


def truncate_jsonl(path: Path, keep: int) -> None:
    """Keep only the first ``keep`` records (used when resuming a run)."""
    records = read_jsonl(path) if Path(path).exists() else []
    try:
        with open(path, "w") as f:
            for record in records[:keep]:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"Failed to rewrite {path}: {e}") from e


def write_json(path: Path, data: Any) -> str:
    """Write ``data`` as indented JSON.

    Returns:
        Path to the created file
    """
    try:
        with open(path, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
    except PermissionError:
        raise StorageError(
            f"Cannot write to {path}: Permission denied. "
            "Try running from a directory where you have write access."
        ) from None
    except OSError as e:
        raise StorageError(f"Failed to write output file {path}: {e}") from e
    return str(path)


def read_json(path: Path) -> Any:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise StorageError(f"Failed to read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise StorageError(f"{path} is not valid JSON: {e}") from e


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise StorageError(f"Failed to write CSV file {path}: {e}") from e
    return str(path)


def pool_records(
    pool: RolloutPool, step: int, query: int, vocab_size: int, window: int
) -> list[dict[str, Any]]:
    """One JSON record per trajectory, carrying the pool's allocation and branch events."""
    events = [
        {"chain_id": e.chain_id, "step": e.step, "width": e.width, "p_t": e.p_t}
        for e in pool.events
    ]
    records = []
    for trajectory in pool.trajectories:
        lineage = None
        if trajectory.lineage is not None:
            lineage = {
                "parent_id": trajectory.lineage.parent_id,
                "branch_step": trajectory.lineage.branch_step,
                "branch_index": trajectory.lineage.branch_index,
            }
        records.append(
            {
                "step": step,
                "query": query,
                "traj_id": trajectory.traj_id,
                "k": pool.allocation.k,
                "m": pool.allocation.m,
                "top_ups": pool.top_ups,
                "prompt": list(trajectory.prompt),
                "tokens": list(trajectory.tokens),
                "loss_mask": [int(m) for m in trajectory.loss_mask],
                "tool_spans": [list(s) for s in trajectory.tool_spans],
                "reward": trajectory.reward,
                "lineage": lineage,
                "high_entropy_run": list(trajectory.high_entropy_run),
                "entropy": build_trace(trajectory, vocab_size, window).to_record(),
                "events": events,
            }
        )
    return records


def dump_pools(
    path: Path,
    pools: Sequence[RolloutPool],
    step: int,
    vocab_size: int,
    window: int,
) -> str:
    """Write one step's pools as JSON lines."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for query, pool in enumerate(pools):
                for record in pool_records(pool, step, query, vocab_size, window):
                    f.write(json.dumps(record) + "\n")
    except OSError as e:
        raise StorageError(f"Failed to write pool dump {path}: {e}") from e
    return str(path)
