"""Deterministic synthetic tools: CALC (addition) and LOOKUP (key table)."""

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from aepo_desk.errors import ConfigError, UsageError
from aepo_desk.world.vocab import Vocabulary


class Tool(str, Enum):
    CALC = "CALC"
    LOOKUP = "LOOKUP"

    @property
    def open_token_name(self) -> str:
        return f"CALL_{self.value}"


def encode_number(value: int, vocab: Vocabulary) -> list[int]:
    """Digit tokens of ``value`` in base ``n_digits``, most significant first."""
    base = vocab.n_digits
    if base < 2:
        raise ConfigError(f"vocabulary has {base} digit tokens; need at least 2")
    if value == 0:
        return [0]
    digits: list[int] = []
    while value > 0:
        value, rem = divmod(value, base)
        digits.append(rem)
    return digits[::-1]


def decode_number(tokens: Sequence[int], vocab: Vocabulary) -> int:
    value = 0
    for t in tokens:
        value = value * vocab.n_digits + t
    return value


@dataclass(frozen=True)
class ToolRegistry:
    """Tools available to one episode.

    The LOOKUP table maps each digit key to a digit value and is derived from
    the task seed, so results cannot be read off the query.
    """

    vocab: Vocabulary
    table: tuple[int, ...]
    seed: int = 0
    failure_rate: float = 0.0

    @classmethod
    def for_seed(cls, vocab: Vocabulary, seed: int, failure_rate: float = 0.0) -> "ToolRegistry":
        if not 0.0 <= failure_rate <= 1.0:
            raise ConfigError(f"tool_failure_rate must be in [0, 1], got {failure_rate}")
        rng = np.random.default_rng(seed)
        table = tuple(int(v) for v in rng.integers(0, vocab.n_digits, size=vocab.n_digits))
        return cls(vocab, table, seed, failure_rate)

    def tool_for_token(self, token: int) -> Tool | None:
        name = self.vocab.name(token)
        for tool in Tool:
            if tool.open_token_name == name:
                return tool
        return None

    def _failed(self, tool: Tool, args: Sequence[int], call_index: int) -> bool:
        if self.failure_rate <= 0.0:
            return False
        entropy = [self.seed, call_index, 0 if tool is Tool.CALC else 1, *args]
        draw = np.random.default_rng(np.random.SeedSequence(entropy)).random()
        return bool(draw < self.failure_rate)


def invoke_tool(
    registry: ToolRegistry, tool: Tool, args: Sequence[int], call_index: int = 0
) -> list[int]:
    """Run ``tool`` on argument tokens and return the result tokens.

    Malformed arguments produce ``[ERROR]``. The result never includes the
    RESULT marker; the environment adds it when splicing.

    Args:
        registry: Tool set for the episode
        tool: Which tool to run
        args: Argument tokens captured between the open token and END_CALL
        call_index: Zero-based index of this call in the episode (seeds failures)
    """
    if not isinstance(tool, Tool):
        raise UsageError(f"Unregistered tool: {tool!r}")

    vocab = registry.vocab
    error = [vocab.id("ERROR")]

    if not all(vocab.is_digit(a) for a in args):
        return error
    if registry._failed(tool, args, call_index):
        return error

    if tool is Tool.CALC:
        if len(args) != 2:
            return error
        return encode_number(args[0] + args[1], vocab)

    if len(args) != 1:
        return error
    return [registry.table[args[0]]]
