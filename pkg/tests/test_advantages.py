"""Tests for accuracy, entropy and reshaped advantages."""

import numpy as np
import pytest

from aepo_desk.errors import ConfigError, UsageError
from aepo_desk.policy.advantages import (
    EntropyScope,
    accuracy_advantage,
    entropy_advantage,
    group_advantages,
    reshape_advantage,
)
from aepo_desk.world.env import Trajectory


def make_trajectory(traj_id, reward, entropies, mask=None):
    size = len(entropies)
    return Trajectory(
        traj_id=traj_id,
        prompt=(0,),
        tokens=(1,) * size,
        old_log_probs=(0.0,) * size,
        entropies=tuple(entropies),
        loss_mask=tuple(mask) if mask is not None else (True,) * size,
        tool_spans=(),
        reward=reward,
    )


class TestAccuracyAdvantage:
    """Tests for accuracy_advantage."""

    def test_worked_example(self):
        """Should standardize with the population std."""
        assert accuracy_advantage([1, 0, 0, 1]).tolist() == [1.0, -1.0, -1.0, 1.0]

    def test_constant_rewards(self):
        """Should return exact zeros for a degenerate group."""
        assert accuracy_advantage([1, 1, 1]).tolist() == [0.0, 0.0, 0.0]

    def test_sums_to_zero(self):
        """Should have zero sum within a group."""
        rewards = np.random.default_rng(0).integers(0, 2, size=16).astype(float)
        rewards[0], rewards[1] = 0.0, 1.0
        assert abs(accuracy_advantage(rewards).sum()) < 1e-9

    def test_group_too_small(self):
        """Should reject groups of one."""
        with pytest.raises(UsageError):
            accuracy_advantage([1.0])


class TestEntropyAdvantage:
    """Tests for entropy_advantage."""

    def test_worked_example(self):
        """Should map [0.1, 0.3] to [-1, 1]."""
        assert entropy_advantage([0.1, 0.3]) == pytest.approx([-1.0, 1.0])

    def test_constant(self):
        """Should return zeros for constant entropies."""
        assert entropy_advantage([0.4, 0.4, 0.4]).tolist() == [0.0, 0.0, 0.0]

    def test_masked_tokens_get_zero(self):
        """Should skip masked tokens in the statistics and zero them out."""
        out = entropy_advantage([0.1, 9.0, 0.3], [True, False, True])
        assert out == pytest.approx([-1.0, 0.0, 1.0])

    def test_single_unmasked_token(self):
        """Should return zeros when fewer than two tokens are unmasked."""
        assert entropy_advantage([0.5, 0.0], [True, False]).tolist() == [0.0, 0.0]

    def test_unit_variance(self):
        """Should have zero mean and unit std over random entropies."""
        out = entropy_advantage(np.random.default_rng(1).uniform(0, 3, size=50))
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-9

    def test_mask_shape(self):
        """Should reject a mask of the wrong length."""
        with pytest.raises(UsageError):
            entropy_advantage([0.1, 0.2], [True])


class TestReshapeAdvantage:
    """Tests for reshape_advantage."""

    def test_zero_weight_is_identity(self):
        """Should return the accuracy advantage bitwise when a = 0."""
        acc = np.array([0.7, -1.3])
        assert np.array_equal(reshape_advantage(acc, np.array([2.0, -5.0]), 0.0), acc)

    def test_worked_examples(self):
        """Should compute acc * (1 + a * ent)."""
        assert reshape_advantage(np.array([1.0]), np.array([1.0]), 0.5)[0] == 1.5
        assert reshape_advantage(np.array([-1.0]), np.array([2.0]), 0.2)[0] == pytest.approx(-1.4)

    def test_shape_mismatch(self):
        """Should reject arrays of different shape."""
        with pytest.raises(UsageError):
            reshape_advantage(np.zeros(2), np.zeros(3), 0.2)


class TestGroupAdvantages:
    """Tests for group_advantages."""

    def test_broadcasts_accuracy(self):
        """Should give every token of a trajectory the same accuracy advantage."""
        group = [
            make_trajectory(0, 1.0, [0.1, 0.3, 0.2]),
            make_trajectory(1, 0.0, [0.5, 0.5]),
        ]
        result = group_advantages(group, a_weight=0.0)
        assert result.acc[0].tolist() == [1.0, 1.0, 1.0]
        assert result.acc[1].tolist() == [-1.0, -1.0]
        assert np.array_equal(result.reshaped[0], result.acc[0])

    def test_group_scope_pools_tokens(self):
        """Should standardize over all unmasked tokens in the group."""
        group = [
            make_trajectory(0, 1.0, [0.1, 0.1]),
            make_trajectory(1, 0.0, [0.3, 0.3]),
        ]
        per_traj = group_advantages(group, scope=EntropyScope.TRAJECTORY)
        pooled = group_advantages(group, scope="group")
        assert per_traj.ent[0].tolist() == [0.0, 0.0]
        assert pooled.ent[0] == pytest.approx([-1.0, -1.0])
        assert pooled.ent[1] == pytest.approx([1.0, 1.0])

    def test_bad_scope(self):
        """Should raise ConfigError for an unknown scope."""
        group = [make_trajectory(0, 1.0, [0.1]), make_trajectory(1, 0.0, [0.2])]
        with pytest.raises(ConfigError):
            group_advantages(group, scope="batch")

    def test_summary(self):
        """Should report min, mean and max of the reshaped advantages."""
        group = [make_trajectory(0, 1.0, [0.2, 0.2]), make_trajectory(1, 0.0, [0.2, 0.2])]
        summary = group_advantages(group).summary()
        assert summary == {"min": -1.0, "mean": 0.0, "max": 1.0}
