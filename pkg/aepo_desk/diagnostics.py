"""Rollout diagnostics over live pools or pool dumps.

Reports how high-entropy tool steps cluster into consecutive runs, how many
distinct chains receive branches in each pool, tool calls per trajectory and
a distinct 4-gram diversity ratio.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from aepo_desk.errors import DumpParseError, StorageError, UsageError
from aepo_desk.rollout.engine import BranchEvent, RolloutPool
from aepo_desk.rollout.entropy import build_trace

logger = logging.getLogger(__name__)

NGRAM = 4

REQUIRED_FIELDS = ("step", "query", "traj_id", "tokens", "loss_mask", "tool_spans", "events")


def high_entropy_run_lengths(delta_h: Sequence[float]) -> list[int]:
    """Lengths of maximal runs of tool steps with ``delta_h > 0``."""
    runs: list[int] = []
    current = 0
    for value in delta_h:
        if value > 0:
            current += 1
        elif current:
            runs.append(current)
            current = 0
    if current:
        runs.append(current)
    return runs


def branched_chain_count(events: Iterable[BranchEvent | dict[str, Any]]) -> int:
    """Number of distinct chains that received at least one branch."""
    parents = set()
    for event in events:
        parents.add(event["chain_id"] if isinstance(event, dict) else event.chain_id)
    return len(parents)


def distinct_ngram_ratio(sequences: Iterable[Sequence[int]], n: int = NGRAM) -> float:
    """Distinct n-grams over total n-grams across all sequences (0 when none)."""
    seen: set[tuple[int, ...]] = set()
    total = 0
    for tokens in sequences:
        for i in range(len(tokens) - n + 1):
            seen.add(tuple(tokens[i:i + n]))
            total += 1
    return len(seen) / total if total else 0.0


def _sorted_histogram(counter: Counter[int]) -> dict[int, int]:
    return {key: counter[key] for key in sorted(counter)}


@dataclass
class DiagnosticsReport:
    pools: int = 0
    trajectories: int = 0
    run_length_histogram: dict[int, int] = field(default_factory=dict)
    branch_histogram: dict[int, int] = field(default_factory=dict)
    tool_call_histogram: dict[int, int] = field(default_factory=dict)
    isolated_share: float = 0.0
    consecutive_share: float = 0.0
    mean_tool_calls: float = 0.0
    ngram_diversity: float = 0.0

    def to_record(self) -> dict[str, Any]:
        return {
            "pools": self.pools,
            "trajectories": self.trajectories,
            "run_length_histogram": {str(k): v for k, v in self.run_length_histogram.items()},
            "branch_histogram": {str(k): v for k, v in self.branch_histogram.items()},
            "tool_call_histogram": {str(k): v for k, v in self.tool_call_histogram.items()},
            "isolated_share": self.isolated_share,
            "consecutive_share": self.consecutive_share,
            "mean_tool_calls": self.mean_tool_calls,
            "ngram_diversity": self.ngram_diversity,
        }


@dataclass
class PoolView:
    """What diagnostics need from one pool, whether live or parsed."""

    delta_h: list[list[float]]
    tool_calls: list[int]
    generated: list[list[int]]
    branched_chains: int


def _view_of(pool: RolloutPool, vocab_size: int, window: int) -> PoolView:
    return PoolView(
        delta_h=[list(build_trace(t, vocab_size, window).delta_h) for t in pool.trajectories],
        tool_calls=[t.tool_calls for t in pool.trajectories],
        generated=[t.generated_tokens for t in pool.trajectories],
        branched_chains=branched_chain_count(pool.events),
    )


def summarize(views: Sequence[PoolView]) -> DiagnosticsReport:
    runs: Counter[int] = Counter()
    branches: Counter[int] = Counter()
    tools: Counter[int] = Counter()
    generated: list[list[int]] = []

    for view in views:
        branches[view.branched_chains] += 1
        for delta_h in view.delta_h:
            runs.update(high_entropy_run_lengths(delta_h))
        tools.update(view.tool_calls)
        generated.extend(view.generated)

    high_turns = sum(length * count for length, count in runs.items())
    isolated = runs.get(1, 0)
    n_traj = sum(tools.values())
    return DiagnosticsReport(
        pools=len(views),
        trajectories=n_traj,
        run_length_histogram=_sorted_histogram(runs),
        branch_histogram=_sorted_histogram(branches),
        tool_call_histogram=_sorted_histogram(tools),
        isolated_share=isolated / high_turns if high_turns else 0.0,
        consecutive_share=(high_turns - isolated) / high_turns if high_turns else 0.0,
        mean_tool_calls=sum(k * v for k, v in tools.items()) / n_traj if n_traj else 0.0,
        ngram_diversity=distinct_ngram_ratio(generated),
    )


def diagnose_pools(
    pools: Sequence[RolloutPool], vocab_size: int, window: int = 16
) -> DiagnosticsReport:
    return summarize([_view_of(pool, vocab_size, window) for pool in pools])


def _parse_record(path: Path, line_number: int, line: str) -> dict[str, Any]:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise DumpParseError(path, line_number, f"invalid JSON ({e.msg})") from None
    if not isinstance(record, dict):
        raise DumpParseError(path, line_number, "record is not an object")
    missing = [name for name in REQUIRED_FIELDS if name not in record]
    if missing:
        raise DumpParseError(path, line_number, f"missing field(s): {', '.join(missing)}")
    entropy = record.get("entropy")
    if not isinstance(entropy, dict) or not isinstance(entropy.get("delta_h"), list):
        raise DumpParseError(path, line_number, "missing entropy.delta_h")
    if not isinstance(record["events"], list) or not all(
        isinstance(e, dict) and "chain_id" in e for e in record["events"]
    ):
        raise DumpParseError(path, line_number, "malformed events")
    if len(record["tokens"]) != len(record["loss_mask"]):
        raise DumpParseError(path, line_number, "tokens and loss_mask lengths differ")
    return record


def load_pool_dump(path: Path) -> list[PoolView]:
    """Parse one dump file into pools, keyed by (step, query) in file order."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise StorageError(f"Failed to read pool dump {path}: {e}") from e

    grouped: dict[tuple[int, int], list[dict[str, Any]]] = {}
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        record = _parse_record(Path(path), line_number, line)
        grouped.setdefault((int(record["step"]), int(record["query"])), []).append(record)

    views = []
    for records in grouped.values():
        views.append(
            PoolView(
                delta_h=[[float(x) for x in r["entropy"]["delta_h"]] for r in records],
                tool_calls=[len(r["tool_spans"]) for r in records],
                generated=[
                    [t for t, keep in zip(r["tokens"], r["loss_mask"]) if keep] for r in records
                ],
                branched_chains=branched_chain_count(records[0]["events"]),
            )
        )
    return views


def diagnose(paths: Sequence[Path]) -> DiagnosticsReport:
    """Aggregate diagnostics over one or more pool dump files."""
    if not paths:
        raise UsageError("diagnose needs at least one pool dump")
    views: list[PoolView] = []
    for path in paths:
        views.extend(load_pool_dump(path))
    logger.debug(f"Loaded {len(views)} pools from {len(paths)} dump(s)")
    return summarize(views)
