"""Entropy quantities that drive budget allocation and branching.

Everything here is recomputed from stored per-token entropies, loss masks and
tool spans; nothing is cached on the trajectory.
"""

import math
from dataclasses import dataclass
from typing import Any, Protocol, Sequence

from aepo_desk.errors import NumericError, UsageError

DEFAULT_ROOT_WINDOW = 16


class EntropySource(Protocol):
    """Anything with response-aligned entropies, masks and tool spans."""

    @property
    def entropies(self) -> Sequence[float]: ...

    @property
    def loss_mask(self) -> Sequence[bool]: ...

    @property
    def tool_spans(self) -> Sequence[tuple[int, int]]: ...


@dataclass(frozen=True)
class EntropyTrace:
    token_entropies: tuple[float, ...]
    h_root: float
    h_tool: tuple[float, ...]
    h_tool_avg: float | None
    delta_h: tuple[float, ...]

    def to_record(self) -> dict[str, Any]:
        return {
            "h_root": self.h_root,
            "h_tool": list(self.h_tool),
            "h_tool_avg": self.h_tool_avg,
            "delta_h": list(self.delta_h),
        }


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def root_entropy(source: EntropySource, window: int = DEFAULT_ROOT_WINDOW) -> float:
    """Mean entropy of the first ``window`` generated tokens, stopping at the first tool call."""
    if window < 1:
        raise UsageError(f"root window must be >= 1, got {window}")
    if not any(source.loss_mask):
        raise UsageError("root_entropy needs at least one generated token")

    limit = len(source.entropies)
    if source.tool_spans:
        limit = source.tool_spans[0][0]
    limit = min(limit, window)
    prefix = [h for h, keep in zip(source.entropies[:limit], source.loss_mask[:limit]) if keep]
    return _mean(prefix)


def tool_step_entropy(source: EntropySource, step: int) -> float:
    """Mean entropy of the generated tokens after tool result ``step``.

    The segment runs up to the next tool result (or the end of the
    trajectory). An empty segment has entropy 0.
    """
    spans = source.tool_spans
    if not 0 <= step < len(spans):
        raise UsageError(f"tool step {step} out of range (trajectory has {len(spans)})")

    start = spans[step][1]
    end = spans[step + 1][0] if step + 1 < len(spans) else len(source.entropies)
    segment = [
        h for h, keep in zip(source.entropies[start:end], source.loss_mask[start:end]) if keep
    ]
    return _mean(segment)


def tool_avg_entropy(step_entropies: Sequence[float]) -> float | None:
    """Arithmetic mean over tool steps, or None when no tool was called."""
    if not step_entropies:
        return None
    return _mean(step_entropies)


def delta_entropy(h_t: float, h_root: float, vocab_size: int) -> float:
    """``(h_t - h_root) / ln V`` clamped to [-1, 1]."""
    if not (math.isfinite(h_t) and math.isfinite(h_root)):
        raise NumericError(f"non-finite entropy (h_t={h_t}, h_root={h_root})")
    if vocab_size < 2:
        raise UsageError(f"vocab_size must be >= 2, got {vocab_size}")
    value = (h_t - h_root) / math.log(vocab_size)
    return min(1.0, max(-1.0, value))


def high_entropy_runs(delta_h: Sequence[float]) -> list[int]:
    """Consecutive ``delta_h > 0`` counter after each tool step.

    The counter grows on every step with positive variation and resets to 0
    otherwise, so it equals the branch-penalty run length ``l`` a chain
    carries into its next step.
    """
    runs: list[int] = []
    current = 0
    for value in delta_h:
        current = current + 1 if value > 0 else 0
        runs.append(current)
    return runs


def build_trace(
    source: EntropySource, vocab_size: int, window: int = DEFAULT_ROOT_WINDOW
) -> EntropyTrace:
    h_root = root_entropy(source, window)
    h_tool = tuple(tool_step_entropy(source, i) for i in range(len(source.tool_spans)))
    return EntropyTrace(
        token_entropies=tuple(source.entropies),
        h_root=h_root,
        h_tool=h_tool,
        h_tool_avg=tool_avg_entropy(h_tool),
        delta_h=tuple(delta_entropy(h, h_root, vocab_size) for h in h_tool),
    )
