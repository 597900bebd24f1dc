"""Tests for the policy core: features, softmax, sampling, scores, checkpoints."""

import math

import numpy as np
import pytest

from aepo_desk.errors import ConfigError, NumericError, StorageError, UsageError
from aepo_desk.policy import core
from aepo_desk.policy.core import PolicyParams
from aepo_desk.world.vocab import Vocabulary


@pytest.fixture
def vocab():
    return Vocabulary.build(24)


@pytest.fixture
def params(vocab):
    rng = np.random.default_rng(0)
    return PolicyParams.random(vocab.size, core.feature_dim(vocab), rng, scale=0.3)


class TestEncodeState:
    """Tests for encode_state and feature_dim."""

    def test_feature_dim(self, vocab):
        """Should count the one-hot slots, counters, phase and copy blocks and the bias."""
        phases = 5 * 3 * 3
        copies = 3 * 3 * 3 * 5 * vocab.n_digits
        assert core.feature_dim(vocab) == 8 * 24 + 1 + 7 + phases + copies + 1

    def test_bias_and_last_token(self, vocab):
        """Should set the bias and the one-hot of the most recent token."""
        tokens = [vocab.id("CALL_CALC"), 3, 4, vocab.id("SEP")]
        features = core.encode_state(vocab, tokens, query_len=4, max_len=64, cap=100.0)

        assert features.shape == (core.feature_dim(vocab),)
        assert features[-1] == 1.0
        assert features[vocab.id("SEP")] == 1.0
        # query block, slot 0
        assert features[4 * 24 + vocab.id("CALL_CALC")] == 1.0
        # no generated tokens yet
        assert features[8 * 24] == 0.0

    def test_norm_is_capped(self, vocab):
        """Should rescale features whose norm exceeds the cap."""
        tokens = [1, 2, 3, 4, 5, 6, 7]
        features = core.encode_state(vocab, tokens, query_len=4, max_len=64, cap=1.5)
        assert np.linalg.norm(features) == pytest.approx(1.5)

    def test_short_prefix_leaves_zero_blocks(self, vocab):
        """Should leave context slots beyond the prefix length empty."""
        features = core.encode_state(vocab, [5], query_len=1, max_len=64, cap=100.0)
        assert features[24:4 * 24].sum() == 0.0

    def test_phase_tracks_mode_and_calls(self, vocab):
        """Should report the latest mode token, tokens since it and spliced results."""
        lookup, calc = vocab.id("CALL_LOOKUP"), vocab.id("CALL_CALC")
        close, result = vocab.id("END_CALL"), vocab.id("RESULT")
        query = [lookup, 4, calc, 7, vocab.id("SEP")]

        assert core.episode_phase(vocab, query, 5) == (0, 0, 0)
        assert core.episode_phase(vocab, [*query, lookup, 4], 5) == (1, 1, 0)
        after_call = [*query, lookup, 4, close, result, 3, calc]
        assert core.episode_phase(vocab, after_call, 5) == (2, 0, 1)
        assert core.episode_phase(vocab, [*after_call, 3, 7, close], 5) == (2, 2, 1)

    def test_copy_sources(self, vocab):
        """Should expose query digits and the digits of the last two results."""
        lookup, close, result = vocab.id("CALL_LOOKUP"), vocab.id("END_CALL"), vocab.id("RESULT")
        query = [lookup, 2, lookup, 5, vocab.id("SEP")]
        tokens = [
            *query, lookup, 2, close, result, 6, lookup, 5, close, result, 1, vocab.id("CALL_CALC")
        ]

        assert core.copy_sources(vocab, query, 5) == (2, 5, None, None, None)
        assert core.copy_sources(vocab, tokens, 5) == (2, 5, 1, None, 6)

    def test_copy_block_is_gated_by_phase(self, vocab):
        """Should fill the copy block in argument modes and leave it empty after a result."""
        lookup, calc = vocab.id("CALL_LOOKUP"), vocab.id("CALL_CALC")
        close, result = vocab.id("END_CALL"), vocab.id("RESULT")
        query = [lookup, 4, calc, 7, vocab.id("SEP")]
        copy_offset = 8 * 24 + 1 + 7 + 45
        width = 5 * vocab.n_digits

        waiting = core.encode_state(vocab, [*query, lookup, 4, close, result, 3], 5, 64, cap=100.0)
        assert waiting[copy_offset:-1].sum() == 0.0

        arguing = core.encode_state(
            vocab, [*query, lookup, 4, close, result, 3, calc], 5, 64, cap=100.0
        )
        # CALC mode, nothing since the marker, one result so far
        block = copy_offset + ((1 * 3 + 0) * 3 + 1) * width
        assert arguing[block + 2 * vocab.n_digits + 3] == 1.0
        assert arguing[block + 1 * vocab.n_digits + 7] == 1.0
        assert arguing[copy_offset:-1].sum() == 3.0


class TestSoftmax:
    """Tests for softmax, log_softmax and token_entropy."""

    def test_sums_to_one(self):
        """Should produce a normalized distribution for large logits."""
        z = np.array([1000.0, 999.0, -50.0, 3.0])
        p = core.softmax(z, 0.6)
        assert math.fsum(p) == pytest.approx(1.0, abs=1e-12)

    def test_zero_logits_are_uniform(self):
        """Should give the uniform distribution and entropy ln V."""
        p = core.softmax(np.zeros(24), 0.6)
        assert np.allclose(p, 1 / 24)
        assert core.token_entropy(p) == pytest.approx(math.log(24))

    def test_one_hot_has_zero_entropy(self):
        """Should treat 0 * log 0 as 0."""
        assert core.token_entropy(np.array([1.0, 0.0, 0.0])) == 0.0

    def test_log_softmax_matches_log_of_softmax(self):
        """Should agree with log(softmax) on moderate logits."""
        z = np.array([0.3, -1.2, 2.5, 0.0])
        assert np.allclose(core.log_softmax(z, 0.6), np.log(core.softmax(z, 0.6)))

    def test_nan_logits_raise(self):
        """Should reject NaN logits."""
        with pytest.raises(NumericError):
            core.softmax(np.array([0.0, np.nan]))

    def test_non_positive_temperature_raises(self):
        """Should reject temperature <= 0."""
        with pytest.raises(ConfigError):
            core.softmax(np.zeros(3), 0.0)


class TestSampling:
    """Tests for sample_token."""

    def test_one_hot_always_sampled(self):
        """Should return the only token with mass."""
        rng = np.random.default_rng(1)
        p = np.array([0.0, 0.0, 1.0, 0.0])
        assert {core.sample_token(p, rng) for _ in range(50)} == {2}

    def test_same_seed_same_tokens(self):
        """Should be deterministic given the generator state."""
        p = core.softmax(np.array([0.1, 0.5, -0.3, 1.0]))
        a = [core.sample_token(p, np.random.default_rng(7)) for _ in range(3)]
        b = [core.sample_token(p, np.random.default_rng(7)) for _ in range(3)]
        assert a == b

    def test_frequencies_follow_p(self):
        """Should match p within a few binomial standard deviations."""
        rng = np.random.default_rng(3)
        p = np.array([0.1, 0.2, 0.3, 0.4])
        draws = 20_000
        counts = np.bincount([core.sample_token(p, rng) for _ in range(draws)], minlength=4)
        sigma = np.sqrt(p * (1 - p) / draws)
        assert np.all(np.abs(counts / draws - p) < 5 * sigma)


class TestScoreFunction:
    """Tests for log_prob, score_function and kl_gradient."""

    def test_matches_finite_differences(self, vocab, params):
        """Should equal central differences of log_prob."""
        rng = np.random.default_rng(5)
        small = PolicyParams(params.weights[:, :10].copy())
        state = rng.normal(size=10)
        token = 3
        analytic = core.score_function(small, state, 0.6, token)

        h = 1e-5
        numeric = np.zeros_like(small.weights)
        for index in np.ndindex(small.weights.shape):
            plus = small.weights.copy()
            minus = small.weights.copy()
            plus[index] += h
            minus[index] -= h
            numeric[index] = (
                core.log_prob(PolicyParams(plus), state, 0.6, token)
                - core.log_prob(PolicyParams(minus), state, 0.6, token)
            ) / (2 * h)
        assert np.allclose(analytic, numeric, rtol=1e-6, atol=1e-9)

    def test_expected_score_is_zero(self, vocab, params):
        """Should average to zero under the policy's own distribution."""
        state = core.encode_state(vocab, [1, 2, vocab.id("SEP")], 3, 64)
        p = core.token_distribution(params, state, 0.6)
        expected = sum(p[a] * core.score_function(params, state, 0.6, a) for a in range(24))
        assert np.max(np.abs(expected)) < 1e-12

    def test_token_out_of_range(self, vocab, params):
        """Should reject tokens outside the vocabulary."""
        state = np.zeros(core.feature_dim(vocab))
        with pytest.raises(UsageError):
            core.log_prob(params, state, 0.6, 24)

    def test_wrong_state_shape(self, params):
        """Should reject a state of the wrong length."""
        with pytest.raises(ConfigError):
            core.logits(params, np.zeros(3))

    def test_kl_gradient_vanishes_at_reference(self, vocab, params):
        """Should be zero when the policy equals the reference."""
        state = core.encode_state(vocab, [1, 2, vocab.id("SEP")], 3, 64)
        grad = core.kl_gradient(params, state, 0.6, params.copy())
        assert np.max(np.abs(grad)) < 1e-12


class TestCheckpoint:
    """Tests for save_checkpoint and load_checkpoint."""

    def test_save_and_load(self, tmp_path, params):
        """Should restore the exact weights."""
        path = tmp_path / "policy.bin"
        core.save_checkpoint(params, path)
        loaded = core.load_checkpoint(path)
        assert np.array_equal(loaded.weights, params.weights)

    def test_header_format(self, tmp_path, params):
        """Should start with the versioned text header."""
        path = tmp_path / "policy.bin"
        core.save_checkpoint(params, path)
        assert path.read_bytes().split(b"\n", 1)[0] == b"aepo-policy v1 V=24 F=1596"

    def test_bad_header(self, tmp_path):
        """Should raise StorageError for a file that is not a checkpoint."""
        path = tmp_path / "policy.bin"
        path.write_bytes(b"hello\n\x00\x00")
        with pytest.raises(StorageError):
            core.load_checkpoint(path)

    def test_truncated_payload(self, tmp_path, params):
        """Should raise StorageError when the payload is short."""
        path = tmp_path / "policy.bin"
        core.save_checkpoint(params, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(StorageError):
            core.load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        """Should raise StorageError for a missing file."""
        with pytest.raises(StorageError):
            core.load_checkpoint(tmp_path / "nope.bin")

    def test_non_finite_weights_rejected(self):
        """Should refuse to build params with NaN entries."""
        with pytest.raises(NumericError):
            PolicyParams(np.array([[np.nan]]))
