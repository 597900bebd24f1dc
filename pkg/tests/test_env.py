"""Tests for ToolWorld episodes."""

import pytest

from aepo_desk.errors import UsageError
from aepo_desk.world.env import Event, Task, ToolWorld, Trajectory, generated_reward
from aepo_desk.world.vocab import Vocabulary

CALC, LOOKUP, END_CALL, ANSWER, END, SEP, RESULT, ERROR = range(10, 18)


@pytest.fixture
def vocab():
    return Vocabulary.build(24)


@pytest.fixture
def world(vocab):
    task = Task(query=(CALC, 3, 4, SEP), answer=(7,), depth=1, seed=0)
    return ToolWorld(task, vocab, max_len=16)


def run(world, tokens):
    state = world.reset()
    events = []
    for token in tokens:
        state, event = world.step(state, token)
        events.append(event)
    return state, events


class TestToolWorldStep:
    """Tests for ToolWorld.step."""

    def test_tool_call_splices_result(self, world):
        """Should splice RESULT and the result digits with mask false."""
        state, events = run(world, [CALC, 3, 4, END_CALL])

        assert events[-1] is Event.TOOL_BOUNDARY
        assert state.response == (CALC, 3, 4, END_CALL, RESULT, 7)
        assert state.mask == (True, True, True, True, False, False)
        assert state.spans == ((4, 6),)

    def test_two_digit_result(self, world):
        """Should splice every digit of a multi-digit result."""
        state, _ = run(world, [CALC, 9, 8, END_CALL])
        assert state.response[4:] == (RESULT, 1, 7)
        assert state.spans == ((4, 7),)

    def test_malformed_call_returns_error(self, world):
        """Should splice ERROR for a call with the wrong arity."""
        state, _ = run(world, [CALC, 3, END_CALL])
        assert state.response[-2:] == (RESULT, ERROR)

    def test_correct_answer(self, world):
        """Should finish with a completed, successful episode."""
        state, events = run(world, [CALC, 3, 4, END_CALL, ANSWER, 7, END])
        assert events[-1] is Event.TERMINAL
        assert state.completed
        assert world.is_success(state)

    def test_wrong_answer(self, world):
        """Should complete but not succeed on a wrong answer."""
        state, _ = run(world, [ANSWER, 8, END])
        assert state.completed
        assert not world.is_success(state)

    def test_end_without_answer(self, world):
        """Should terminate without completion when END comes first."""
        state, _ = run(world, [END])
        assert state.terminal
        assert not state.completed

    def test_non_digit_closes_answer(self, world):
        """Should end the episode on the first non-digit after ANSWER."""
        state, events = run(world, [ANSWER, 7, SEP])
        assert events[-1] is Event.TERMINAL
        assert world.is_success(state)

    def test_truncation(self, vocab):
        """Should truncate once the response reaches max_len."""
        task = Task(query=(3, SEP), answer=(3,), depth=0, seed=0)
        world = ToolWorld(task, vocab, max_len=3)
        state, events = run(world, [SEP, SEP, SEP])
        assert state.truncated
        assert events[-1] is Event.TERMINAL

    def test_step_after_terminal(self, world):
        """Should refuse to step a finished episode."""
        state, _ = run(world, [END])
        with pytest.raises(UsageError):
            world.step(state, END)

    def test_token_out_of_range(self, world):
        """Should reject tokens outside the vocabulary."""
        with pytest.raises(UsageError):
            world.step(world.reset(), 24)


class TestReward:
    """Tests for replay-based rewards."""

    def test_reward_regenerates_tool_results(self, world):
        """Should score a trajectory from its generated tokens only."""
        state, _ = run(world, [CALC, 3, 4, END_CALL, ANSWER, 7, END])
        trajectory = Trajectory(
            traj_id=0,
            prompt=world.task.query,
            tokens=state.response,
            old_log_probs=(0.0,) * len(state.response),
            entropies=(0.0,) * len(state.response),
            loss_mask=state.mask,
            tool_spans=state.spans,
            reward=0.0,
        )
        assert world.reward(trajectory) == 1.0

    def test_generated_reward(self, world):
        """Should return 0.0 for an unfinished episode."""
        assert generated_reward(world, [CALC, 3, 4, END_CALL]) == 0.0
        assert generated_reward(world, [ANSWER, 7, END]) == 1.0

    def test_signature_ignores_token_identity(self, world):
        """Should give equal signatures to episodes with equal futures."""
        a, _ = run(world, [SEP, 18])
        b, _ = run(world, [19, 20])
        assert a.signature() == b.signature()
