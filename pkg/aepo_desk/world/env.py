"""Multi-turn tool-use episodes with verifiable rewards.

An episode starts from the query tokens. The policy emits one token at a
time; ``CALL_CALC``/``CALL_LOOKUP`` open argument capture, ``END_CALL``
invokes the tool and splices ``RESULT`` plus the result tokens into the
sequence with loss mask false, ``ANSWER`` opens answer capture and ``END``
(or any non-digit after the answer digits) finishes the episode.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

from aepo_desk.errors import UsageError
from aepo_desk.world.tools import Tool, ToolRegistry, invoke_tool
from aepo_desk.world.vocab import Role, Vocabulary

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 64


@dataclass(frozen=True)
class Task:
    query: tuple[int, ...]
    answer: tuple[int, ...]
    depth: int
    seed: int

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise UsageError(f"task depth must be >= 0, got {self.depth}")
        if not self.query:
            raise UsageError("task query is empty")


class Event(str, Enum):
    NONE = "none"
    TOOL_BOUNDARY = "tool_boundary"
    TERMINAL = "terminal"


@dataclass(frozen=True)
class EpisodeState:
    tokens: tuple[int, ...]
    query_len: int
    step: int = 0
    pending: tuple[Tool, tuple[int, ...]] | None = None
    answer: tuple[int, ...] | None = None
    completed: bool = False
    terminal: bool = False
    truncated: bool = False
    mask: tuple[bool, ...] = ()
    spans: tuple[tuple[int, int], ...] = ()

    @property
    def response(self) -> tuple[int, ...]:
        return self.tokens[self.query_len:]

    @property
    def tool_calls(self) -> int:
        return len(self.spans)

    def signature(self) -> tuple[object, ...]:
        """Everything that can influence future rewards, minus the token history."""
        return (
            self.pending,
            self.answer,
            self.completed,
            self.terminal,
            self.truncated,
            len(self.response),
            self.tool_calls,
        )


@dataclass(frozen=True)
class Lineage:
    parent_id: int
    branch_step: int
    branch_index: int


@dataclass(frozen=True)
class Trajectory:
    """One finished episode, response tokens only (the query lives in ``prompt``)."""

    traj_id: int
    prompt: tuple[int, ...]
    tokens: tuple[int, ...]
    old_log_probs: tuple[float, ...]
    entropies: tuple[float, ...]
    loss_mask: tuple[bool, ...]
    tool_spans: tuple[tuple[int, int], ...]
    reward: float
    lineage: Lineage | None = None
    high_entropy_run: tuple[int, ...] = ()
    truncated: bool = False

    @property
    def tool_calls(self) -> int:
        return len(self.tool_spans)

    @property
    def generated_tokens(self) -> list[int]:
        return [t for t, keep in zip(self.tokens, self.loss_mask) if keep]

    @property
    def unmasked_count(self) -> int:
        return sum(self.loss_mask)


class ToolWorld:
    """Environment for a single task. Stateless apart from its configuration."""

    def __init__(
        self,
        task: Task,
        vocab: Vocabulary,
        max_len: int = DEFAULT_MAX_LEN,
        failure_rate: float = 0.0,
    ):
        if max_len < 1:
            raise UsageError(f"max_len must be >= 1, got {max_len}")
        self.task = task
        self.vocab = vocab
        self.max_len = max_len
        self.registry = ToolRegistry.for_seed(vocab, task.seed, failure_rate)

    def reset(self) -> EpisodeState:
        return EpisodeState(tokens=tuple(self.task.query), query_len=len(self.task.query))

    def step(self, state: EpisodeState, token: int) -> tuple[EpisodeState, Event]:
        """Apply one policy token.

        Returns:
            (new_state, event) where event is TOOL_BOUNDARY right after a tool
            result was spliced and TERMINAL once the episode is over.
        """
        if state.terminal:
            raise UsageError("step() called on a terminal episode")
        if not 0 <= token < self.vocab.size:
            raise UsageError(f"token {token} out of range [0, {self.vocab.size})")

        vocab = self.vocab
        role = vocab.role(token)
        tokens = state.tokens + (token,)
        mask = state.mask + (True,)
        spans = state.spans
        pending = state.pending
        answer = state.answer
        completed = False
        terminal = False
        event = Event.NONE

        if role is Role.END:
            terminal = True
            completed = answer is not None
        elif answer is not None:
            if vocab.is_digit(token):
                answer = answer + (token,)
            else:
                terminal = True
                completed = True
        elif pending is not None:
            tool, args = pending
            if role is Role.TOOL_CLOSE:
                result = invoke_tool(self.registry, tool, args, call_index=len(spans))
                spliced = (vocab.id("RESULT"), *result)
                start = len(tokens) - state.query_len
                tokens = tokens + spliced
                mask = mask + (False,) * len(spliced)
                spans = spans + ((start, start + len(spliced)),)
                pending = None
                event = Event.TOOL_BOUNDARY
                logger.debug(f"{tool.value}{list(args)} -> {vocab.render(result)}")
            else:
                pending = (tool, args + (token,))
        elif role is Role.TOOL_OPEN:
            tool_for_token = self.registry.tool_for_token(token)
            assert tool_for_token is not None
            pending = (tool_for_token, ())
        elif role is Role.ANSWER:
            answer = ()

        truncated = False
        if not terminal and len(tokens) - state.query_len >= self.max_len:
            terminal = True
            truncated = True

        if terminal:
            event = Event.TERMINAL

        return (
            replace(
                state,
                tokens=tokens,
                step=state.step + 1,
                pending=pending,
                answer=answer,
                completed=completed,
                terminal=terminal,
                truncated=truncated,
                mask=mask,
                spans=spans,
            ),
            event,
        )

    def replay(self, generated: Iterable[int]) -> EpisodeState:
        """Re-run the episode over model-generated tokens, regenerating tool results."""
        state = self.reset()
        for token in generated:
            if state.terminal:
                break
            state, _ = self.step(state, token)
        return state

    def is_success(self, state: EpisodeState) -> bool:
        return state.terminal and state.completed and state.answer == self.task.answer

    def reward(self, trajectory: Trajectory) -> float:
        """1.0 iff the decoded answer equals the ground truth exactly."""
        state = self.replay(trajectory.generated_tokens)
        return 1.0 if self.is_success(state) else 0.0


def reward(trajectory: Trajectory, world: ToolWorld) -> float:
    return world.reward(trajectory)


def generated_reward(world: ToolWorld, generated: Sequence[int]) -> float:
    return 1.0 if world.is_success(world.replay(generated)) else 0.0
