"""Tests for rollout diagnostics."""

import json

import numpy as np
import pytest

from aepo_desk.diagnostics import (
    branched_chain_count,
    diagnose,
    diagnose_pools,
    distinct_ngram_ratio,
    high_entropy_run_lengths,
    load_pool_dump,
)
from aepo_desk.errors import DumpParseError, StorageError, UsageError
from aepo_desk.rollout.engine import BranchEvent, RolloutConfig, rollout
from aepo_desk.rollout.policies import ScriptedPolicy
from aepo_desk.world.env import ToolWorld
from aepo_desk.world.tasks import generate_task
from aepo_desk.world.vocab import Vocabulary


def record(step, query, traj_id, delta_h, chains):
    return {
        "step": step,
        "query": query,
        "traj_id": traj_id,
        "tokens": [1, 2, 3, 4, 5],
        "loss_mask": [1, 1, 1, 1, 1],
        "tool_spans": [[0, 1]] * len(delta_h),
        "events": [{"chain_id": c, "step": 0, "width": 2, "p_t": 0.3} for c in chains],
        "entropy": {"delta_h": delta_h},
    }


@pytest.fixture
def dump(tmp_path):
    records = [
        record(0, 0, 0, [0.2, 0.3, -0.1], [0, 0, 1]),
        record(0, 0, 1, [0.1], [0, 0, 1]),
        record(0, 1, 0, [-0.2, -0.1], []),
        record(0, 1, 1, [0.4, 0.4, 0.4], []),
        record(1, 0, 0, [0.1, -0.1, 0.2], [3]),
        record(1, 0, 1, [], [3]),
    ]
    path = tmp_path / "pools.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return path


class TestHelpers:
    """Tests for the counting helpers."""

    def test_run_lengths(self):
        """Should split positive steps into maximal runs."""
        assert high_entropy_run_lengths([0.1, 0.2, -0.1, 0.3, 0.0, 0.5, 0.5, 0.5]) == [2, 1, 3]
        assert high_entropy_run_lengths([]) == []

    def test_branched_chains(self):
        """Should count distinct parents from events or dicts."""
        events = [BranchEvent(0, 0, 2, 0.3), BranchEvent(0, 1, 2, 0.3), BranchEvent(2, 0, 1, 0.2)]
        assert branched_chain_count(events) == 2
        assert branched_chain_count([{"chain_id": 5}]) == 1

    def test_ngram_ratio(self):
        """Should divide distinct n-grams by all n-grams."""
        assert distinct_ngram_ratio([[1, 2, 3, 4, 5], [1, 2, 3, 4, 5]]) == pytest.approx(0.5)
        assert distinct_ngram_ratio([[1, 2]]) == 0.0


class TestDiagnoseDump:
    """Tests for diagnose over pool dump files."""

    def test_groups_by_step_and_query(self, dump):
        """Should split the file into one view per (step, query)."""
        assert len(load_pool_dump(dump)) == 3

    def test_histograms(self, dump):
        """Should aggregate run lengths, branched chains and tool calls."""
        report = diagnose([dump])

        assert report.pools == 3
        assert report.trajectories == 6
        assert report.run_length_histogram == {1: 3, 2: 1, 3: 1}
        assert report.branch_histogram == {0: 1, 1: 1, 2: 1}
        assert report.tool_call_histogram == {0: 1, 1: 1, 2: 1, 3: 3}
        assert report.isolated_share == pytest.approx(3 / 8)
        assert report.consecutive_share == pytest.approx(5 / 8)
        assert report.mean_tool_calls == pytest.approx(2.0)
        assert report.ngram_diversity == pytest.approx(2 / 12)

    def test_record_uses_string_keys(self, dump):
        """Should stringify histogram keys for JSON output."""
        assert diagnose([dump]).to_record()["branch_histogram"] == {"0": 1, "1": 1, "2": 1}

    def test_multiple_files(self, dump):
        """Should add up pools across files."""
        assert diagnose([dump, dump]).pools == 6

    def test_malformed_line(self, tmp_path):
        """Should name the line that failed to parse."""
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(record(0, 0, 0, [0.1], [])) + "\n{oops\n")
        with pytest.raises(DumpParseError) as exc_info:
            diagnose([path])
        assert exc_info.value.line_number == 2

    def test_missing_field(self, tmp_path):
        """Should reject records without the required fields."""
        bad = record(0, 0, 0, [0.1], [])
        del bad["tool_spans"]
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(bad) + "\n")
        with pytest.raises(DumpParseError, match="tool_spans"):
            diagnose([path])

    def test_mask_length_mismatch(self, tmp_path):
        """Should reject records whose mask does not match the tokens."""
        bad = record(0, 0, 0, [0.1], [])
        bad["loss_mask"] = [1]
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(bad) + "\n")
        with pytest.raises(DumpParseError):
            diagnose([path])

    def test_missing_file(self, tmp_path):
        """Should raise StorageError for a missing dump."""
        with pytest.raises(StorageError):
            diagnose([tmp_path / "none.jsonl"])

    def test_no_files(self):
        """Should require at least one dump."""
        with pytest.raises(UsageError):
            diagnose([])


class TestDiagnoseLivePools:
    """Tests for diagnose_pools."""

    def test_scripted_pool(self):
        """Should report two branched chains and two tool calls per trajectory."""
        vocab = Vocabulary.build(24)
        task = generate_task(vocab, 2, seed=7)
        policy = ScriptedPolicy(task, vocab, entropy=1.0)
        pool = rollout(policy, ToolWorld(task, vocab), RolloutConfig(k=8), np.random.default_rng(0))

        report = diagnose_pools([pool], vocab.size)
        assert report.branch_histogram == {2: 1}
        assert report.run_length_histogram == {}
        assert report.mean_tool_calls == 2.0
