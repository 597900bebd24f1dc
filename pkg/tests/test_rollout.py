"""Tests for budget allocation, branching decisions and the rollout loop."""

import math

import numpy as np
import pytest

from aepo_desk.errors import ConfigError, UsageError
from aepo_desk.policy import core
from aepo_desk.policy.core import PolicyParams
from aepo_desk.rollout.engine import (
    CONTINUE,
    Branch,
    BranchBudget,
    BranchState,
    DecideMode,
    RolloutConfig,
    RolloutMode,
    allocate_budget,
    branch,
    branch_probability,
    decide_action,
    premonitor,
    rollout,
    sample_trajectory,
)
from aepo_desk.rollout.policies import LinearPolicy, ScriptedPolicy
from aepo_desk.world.env import Lineage, ToolWorld
from aepo_desk.world.tasks import generate_task
from aepo_desk.world.vocab import Vocabulary


@pytest.fixture
def vocab():
    return Vocabulary.build(24)


@pytest.fixture
def task(vocab):
    return generate_task(vocab, 2, seed=7)


@pytest.fixture
def world(task, vocab):
    return ToolWorld(task, vocab)


def root_heavy(episode):
    """2.0 before the first tool call, 0.5 afterwards."""
    return 2.0 if episode.tool_calls == 0 else 0.5


def tool_heavy(episode):
    """0.0 before the first tool call, 3.0 afterwards."""
    return 0.0 if episode.tool_calls == 0 else 3.0


def lineage_roots(trajectories):
    by_id = {t.traj_id: t for t in trajectories}
    roots = {}
    for t in trajectories:
        current = t
        while current.lineage is not None:
            current = by_id[current.lineage.parent_id]
        roots[t.traj_id] = current.traj_id
    return roots


def lineage_depths(trajectories):
    """Number of branch points between each trajectory and its global root."""
    by_id = {t.traj_id: t for t in trajectories}
    depths = {}
    for t in trajectories:
        depth, current = 0, t
        while current.lineage is not None:
            current = by_id[current.lineage.parent_id]
            depth += 1
        depths[t.traj_id] = depth
    return depths


class TestAllocateBudget:
    """Tests for allocate_budget."""

    def test_equal_entropies_split_evenly(self):
        """Should give m = k / 2 when root and tool entropy match."""
        assert allocate_budget(16, 0.7, 0.7, 0.2).m == 8

    def test_small_gap(self):
        """Should round 16 * sigmoid(-0.08) to 8."""
        allocation = allocate_budget(16, 0.2, 0.6, 0.2)
        assert allocation.m == 8
        assert allocation.b == 8

    def test_large_gap(self):
        """Should shift budget towards branching when tools raise entropy."""
        assert allocate_budget(16, 1.0, 3.0, 0.5).m == 4

    def test_clamped(self):
        """Should keep m within [1, k - 1]."""
        assert allocate_budget(8, 0.0, 500.0, 1.0).m == 1
        assert allocate_budget(8, 500.0, 0.0, 1.0).m == 7

    def test_no_tool_calls(self):
        """Should spend the whole budget on global samples."""
        allocation = allocate_budget(8, 1.0, None, 0.2)
        assert allocation.m == 8
        assert allocation.b == 0


class TestBranchProbability:
    """Tests for branch_probability and decide_action."""

    def test_worked_example(self):
        """Should apply the base rate, entropy slope and run penalty."""
        config = RolloutConfig()
        assert branch_probability(0.5, 2, config) == pytest.approx(0.18)

    def test_base_case(self):
        """Should equal alpha_base with no variation and no run."""
        assert branch_probability(0.0, 0, RolloutConfig()) == pytest.approx(0.2)

    def test_penalty_saturates(self):
        """Should reach zero once lambda * l >= 1."""
        assert branch_probability(0.5, 5, RolloutConfig()) == 0.0
        assert branch_probability(0.5, 9, RolloutConfig()) == 0.0

    def test_penalty_is_monotone(self):
        """Should strictly decrease in l until it hits zero."""
        config = RolloutConfig()
        values = [branch_probability(0.3, run, config) for run in range(6)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_negative_run(self):
        """Should reject a negative run length."""
        with pytest.raises(UsageError):
            branch_probability(0.0, -1, RolloutConfig())

    def test_threshold_is_strict(self):
        """Should continue when p equals the threshold."""
        config = RolloutConfig(tau_branch=0.15)
        assert decide_action(0.15, config) is CONTINUE
        assert decide_action(0.18, config) == Branch(2)
        assert decide_action(0.0, config) is CONTINUE

    def test_bernoulli_mode(self):
        """Should draw against p and require an rng."""
        config = RolloutConfig(decide_mode=DecideMode.BERNOULLI)
        rng = np.random.default_rng(0)
        assert decide_action(1.0, config, rng) == Branch(2)
        assert decide_action(0.0, config, rng) is CONTINUE
        with pytest.raises(UsageError):
            decide_action(0.5, config)

    def test_config_validation(self):
        """Should reject out-of-range knobs."""
        with pytest.raises(ConfigError):
            RolloutConfig(k=1)
        with pytest.raises(ConfigError):
            RolloutConfig(alpha_base=1.5)
        with pytest.raises(ConfigError):
            RolloutConfig(branch_width=0)


class TestBranchBudget:
    """Tests for BranchBudget."""

    def test_take_within_budget(self):
        """Should grant the full request when enough budget remains."""
        budget = BranchBudget(5)
        assert budget.take(2) == 2
        assert budget.remaining == 3

    def test_take_capped(self):
        """Should grant only what is left."""
        budget = BranchBudget(3)
        assert budget.take(4) == 3
        assert budget.take(2) == 0

    def test_drain(self):
        """Should return the remainder and leave zero."""
        budget = BranchBudget(4)
        assert budget.drain() == 4
        assert budget.remaining == 0


class TestPremonitor:
    """Tests for premonitor."""

    def test_root_heavy_probe_favours_global_samples(self, task, vocab, world):
        """Should pick m above k / 2 when tools lower the entropy."""
        policy = ScriptedPolicy(task, vocab, entropy=root_heavy)
        allocation, probe = premonitor(policy, world, RolloutConfig(k=8), np.random.default_rng(0))
        assert allocation.m == round(8 / (1 + math.exp(-0.2 * 1.5)))
        assert probe.reward == 1.0

    def test_tree_mode_splits_in_half(self, task, vocab, world):
        """Should ignore entropies in tree mode."""
        policy = ScriptedPolicy(task, vocab, entropy=root_heavy)
        config = RolloutConfig(k=8, mode=RolloutMode.TREE)
        allocation, _ = premonitor(policy, world, config, np.random.default_rng(0))
        assert allocation.m == 4

    def test_flat_mode(self, task, vocab, world):
        """Should use the whole budget for global samples."""
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        config = RolloutConfig(k=8, mode=RolloutMode.FLAT)
        allocation, _ = premonitor(policy, world, config, np.random.default_rng(0))
        assert allocation.m == 8


class TestRollout:
    """Tests for rollout."""

    def test_constant_entropy_branches_two_chains(self, task, vocab, world):
        """Should fork chains 0 and 1 at the first tool step and fill k."""
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        pool = rollout(policy, world, RolloutConfig(k=8), np.random.default_rng(0))

        assert pool.allocation.m == 4
        assert [t.traj_id for t in pool.trajectories] == list(range(8))
        assert [(e.chain_id, e.step, e.width) for e in pool.events] == [(0, 0, 2), (1, 0, 2)]
        assert pool.events[0].p_t == pytest.approx(0.2)
        assert pool.top_ups == 0
        parents = {t.lineage.parent_id for t in pool.trajectories if t.lineage}
        assert parents == {0, 1}
        assert all(t.reward == 1.0 for t in pool.trajectories)

    def test_no_branching_tops_up(self, task, vocab, world):
        """Should fill the unused branch budget with extra global samples."""
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        config = RolloutConfig(k=8, tau_branch=0.5)
        pool = rollout(policy, world, config, np.random.default_rng(0))

        assert len(pool.trajectories) == 8
        assert pool.events == ()
        assert pool.top_ups == 4
        assert all(t.lineage is None for t in pool.trajectories)

    def test_wide_branch_spends_budget_on_chain_zero(self, task, vocab, world):
        """Should give all k - m children to chain 0 when Z = k - m."""
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        config = RolloutConfig(k=8, branch_width=4)
        pool = rollout(policy, world, config, np.random.default_rng(0))

        children = [t for t in pool.trajectories if t.lineage]
        assert len(children) == 4
        assert {(t.lineage.parent_id, t.lineage.branch_step) for t in children} == {(0, 0)}
        assert [t.lineage.branch_index for t in children] == [0, 1, 2, 3]

    def test_children_share_parent_prefix(self, task, vocab, world):
        """Should copy the parent's tokens through the branch point."""
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        pool = rollout(policy, world, RolloutConfig(k=8), np.random.default_rng(0))
        by_id = {t.traj_id: t for t in pool.trajectories}

        for child in by_id.values():
            if child.lineage is None:
                continue
            parent = by_id[child.lineage.parent_id]
            cut = parent.tool_spans[child.lineage.branch_step][1]
            assert child.tokens[:cut] == parent.tokens[:cut]
            assert child.old_log_probs[:cut] == parent.old_log_probs[:cut]
            assert child.loss_mask[:cut] == parent.loss_mask[:cut]

    def test_penalty_limits_consecutive_branching(self, vocab):
        """Should stop a lineage from branching more than Z times in a row under high entropy."""
        task = generate_task(vocab, 3, seed=5)
        world = ToolWorld(task, vocab)
        policy = ScriptedPolicy(task, vocab, entropy=tool_heavy)
        # one global chain and a budget large enough to branch at every tool step
        config = RolloutConfig(k=32, beta_sens=5.0, lambda_pen=0.5)

        pool = rollout(policy, world, config, np.random.default_rng(0))
        assert pool.allocation.m == 1
        assert max(lineage_depths(pool.trajectories).values()) == config.branch_width

        unpenalized = RolloutConfig(k=32, beta_sens=5.0, lambda_pen=0.0)
        free = rollout(policy, world, unpenalized, np.random.default_rng(0))
        assert max(lineage_depths(free.trajectories).values()) == 3

    def test_no_lineage_takes_whole_budget(self, vocab):
        """Should spread the branch budget over several global chains."""
        task = generate_task(vocab, 3, seed=5)
        policy = ScriptedPolicy(task, vocab, entropy=tool_heavy)
        config = RolloutConfig(k=8)

        pool = rollout(policy, ToolWorld(task, vocab), config, np.random.default_rng(0))
        budget = pool.allocation.k - pool.allocation.m
        assert pool.allocation.m >= 2
        assert config.branch_width <= math.ceil(budget / 2)

        roots = lineage_roots(pool.trajectories)
        descendants = [
            sum(1 for t in pool.trajectories if t.lineage and roots[t.traj_id] == root)
            for root in set(roots.values())
        ]
        assert max(descendants) < budget
        assert sum(1 for n in descendants if n > 0) >= 2

    def test_no_tool_task(self, vocab):
        """Should produce k global samples for a task without tools."""
        task = generate_task(vocab, 0, seed=3)
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        pool = rollout(policy, ToolWorld(task, vocab), RolloutConfig(k=4), np.random.default_rng(0))
        assert pool.allocation.m == 4
        assert pool.events == ()
        assert len(pool.trajectories) == 4

    def test_flat_mode_never_branches(self, task, vocab, world):
        """Should sample k independent trajectories."""
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        config = RolloutConfig(k=6, mode=RolloutMode.FLAT)
        pool = rollout(policy, world, config, np.random.default_rng(0))
        assert pool.events == ()
        assert len(pool.trajectories) == 6

    def test_reproducible(self, task, vocab, world):
        """Should produce identical pools from identical seeds."""
        params = PolicyParams.random(
            vocab.size, core.feature_dim(vocab), np.random.default_rng(1), scale=1.0
        )
        policy = LinearPolicy(params, vocab)
        a = rollout(policy, world, RolloutConfig(k=8), np.random.default_rng(42))
        b = rollout(policy, world, RolloutConfig(k=8), np.random.default_rng(42))
        assert a == b

    def test_records_entropy_runs(self, task, vocab, world):
        """Should annotate every trajectory with its run-length trace."""
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        pool = rollout(policy, world, RolloutConfig(k=4), np.random.default_rng(0))
        # constant entropy means no step ever rises above the root
        assert all(t.high_entropy_run == (0, 0) for t in pool.trajectories)


class TestSampleTrajectory:
    """Tests for sample_trajectory."""

    def test_scripted_episode(self, task, vocab, world):
        """Should record entropies and zero log-probs for spliced tokens."""
        policy = ScriptedPolicy(task, vocab, entropy=0.3)
        trajectory = sample_trajectory(policy, world, np.random.default_rng(0))

        assert trajectory.reward == 1.0
        assert trajectory.tool_calls == 2
        for h, lp, keep in zip(
            trajectory.entropies, trajectory.old_log_probs, trajectory.loss_mask
        ):
            if keep:
                assert h == 0.3
            else:
                assert (h, lp) == (0.0, 0.0)


class TestBranch:
    """Tests for branch."""

    @pytest.fixture
    def parent(self, task, vocab, world):
        policy = ScriptedPolicy(task, vocab, entropy=0.3)
        trajectory = sample_trajectory(policy, world, np.random.default_rng(0))
        return BranchState(
            chain_id=0,
            state=world.replay(trajectory.generated_tokens),
            run_length=2,
            tokens=list(trajectory.tokens),
            old_log_probs=list(trajectory.old_log_probs),
            entropies=list(trajectory.entropies),
            loss_mask=list(trajectory.loss_mask),
        )

    def test_children_copy_prefix(self, parent, world):
        """Should fork children that share the prefix through the first result."""
        budget = BranchBudget(3)
        children = branch(parent, 0, 2, budget, 5, world)

        cut = parent.tool_spans[0][1]
        assert budget.remaining == 1
        assert [c.chain_id for c in children] == [5, 6]
        for index, child in enumerate(children):
            assert child.tokens == parent.tokens[:cut]
            assert child.loss_mask == parent.loss_mask[:cut]
            assert child.lineage == Lineage(0, 0, index)
            assert child.run_length == 2
            assert child.next_decision == 1
            assert child.state.spans == parent.tool_spans[:1]

    def test_budget_caps_width(self, parent, world):
        """Should grant only what is left of the budget."""
        assert len(branch(parent, 1, 4, BranchBudget(1), 1, world)) == 1
        assert branch(parent, 1, 2, BranchBudget(0), 1, world) == []

    def test_unknown_step(self, parent, world):
        """Should reject a tool step the parent never reached."""
        with pytest.raises(UsageError):
            branch(parent, 5, 2, BranchBudget(2), 1, world)
