"""Linear softmax token policy with closed-form score function."""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from aepo_desk.errors import ConfigError, NumericError, StorageError, UsageError
from aepo_desk.world.vocab import ROLE_ORDER, Vocabulary

logger = logging.getLogger(__name__)

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]

CONTEXT_WINDOW = 4
QUERY_SLOTS = 4
PHASE_CAP = 3
PHASE_MODES = ("SEP", "CALL_LOOKUP", "CALL_CALC", "RESULT", "ANSWER")
COPY_MODES = ("CALL_LOOKUP", "CALL_CALC", "ANSWER")
# query digit 0/1, latest result digit 0/1, previous result digit 0
COPY_SOURCES = ("query0", "query1", "result0", "result1", "previous0")
PROB_FLOOR = 1e-300
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))
DEFAULT_TEMPERATURE = 0.6

CHECKPOINT_MAGIC = "aepo-policy v1"
_HEADER_RE = re.compile(r"^aepo-policy v1 V=(\d+) F=(\d+)$")


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class PolicyParams:
    """Weight matrix of shape (V, F)."""

    weights: Matrix

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise ConfigError(f"weights must be 2-D, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise NumericError("policy weights contain non-finite entries")

    @property
    def vocab_size(self) -> int:
        return int(self.weights.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[1])

    @classmethod
    def zeros(cls, vocab_size: int, feature_dim: int) -> "PolicyParams":
        return cls(np.zeros((vocab_size, feature_dim)))

    @classmethod
    def random(
        cls, vocab_size: int, feature_dim: int, rng: np.random.Generator, scale: float = 0.1
    ) -> "PolicyParams":
        return cls(rng.normal(0.0, scale, size=(vocab_size, feature_dim)))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy())


def feature_dim(vocab: Vocabulary) -> int:
    """Length of the state vector produced by :func:`encode_state`."""
    return (
        CONTEXT_WINDOW * vocab.size
        + QUERY_SLOTS * vocab.size
        + 1
        + len(ROLE_ORDER)
        + len(PHASE_MODES) * PHASE_CAP * PHASE_CAP
        + len(COPY_MODES) * PHASE_CAP * PHASE_CAP * len(COPY_SOURCES) * vocab.n_digits
        + 1
    )


def _last_index(tokens: Sequence[int], wanted: set[int], stop: int = 0) -> int:
    for i in range(len(tokens) - 1, stop - 1, -1):
        if tokens[i] in wanted:
            return i
    return -1


def _digit_at(vocab: Vocabulary, tokens: Sequence[int], index: int) -> int | None:
    if 0 <= index < len(tokens) and vocab.is_digit(tokens[index]):
        return tokens[index]
    return None


def episode_phase(
    vocab: Vocabulary, tokens: Sequence[int], query_len: int
) -> tuple[int, int, int]:
    """``(mode, since, calls)`` for the visible prefix.

    ``mode`` indexes :data:`PHASE_MODES` by the most recent mode token,
    ``since`` counts tokens after it and ``calls`` counts spliced results.
    The two counters saturate at ``PHASE_CAP - 1``.
    """
    mode_ids = [vocab.id(name) for name in PHASE_MODES]
    last = _last_index(tokens, set(mode_ids))
    mode = mode_ids.index(tokens[last]) if last >= 0 else 0
    since = len(tokens) - 1 - last if last >= 0 else len(tokens) - query_len
    result = vocab.id("RESULT")
    calls = sum(1 for t in tokens[query_len:] if t == result)
    return mode, min(since, PHASE_CAP - 1), min(calls, PHASE_CAP - 1)


def copy_sources(
    vocab: Vocabulary, tokens: Sequence[int], query_len: int
) -> tuple[int | None, ...]:
    """Digits a correct next token may copy, in :data:`COPY_SOURCES` order."""
    query_digits = [t for t in tokens[:query_len] if vocab.is_digit(t)][:2]
    query_digits += [None] * (2 - len(query_digits))
    result = vocab.id("RESULT")
    latest = _last_index(tokens, {result}, stop=query_len)
    previous = _last_index(tokens[:latest], {result}, stop=query_len) if latest >= 0 else -1
    return (
        *query_digits,
        _digit_at(vocab, tokens, latest + 1) if latest >= 0 else None,
        _digit_at(vocab, tokens, latest + 2) if latest >= 0 else None,
        _digit_at(vocab, tokens, previous + 1) if previous >= 0 else None,
    )


def encode_state(
    vocab: Vocabulary,
    tokens: Sequence[int],
    query_len: int,
    max_len: int,
    cap: float = 4.0,
) -> Vector:
    """Encode the visible episode prefix as a fixed-length feature vector.

    Blocks, in order: one-hot of the last four tokens (most recent first),
    one-hot of the first four query tokens, generated-token count over
    ``max_len``, per-role counts over ``max_len``, a one-hot of the episode
    phase, one-hots of the copyable digits gated by the phase (only in the
    tool-argument and answer modes), and a constant bias.

    Args:
        vocab: Token vocabulary
        tokens: Visible tokens, query first
        query_len: Number of leading query tokens in ``tokens``
        max_len: Episode cap used for normalization
        cap: Upper bound on the Euclidean norm of the result
    """
    size = vocab.size
    features = np.zeros(feature_dim(vocab))

    for slot in range(min(CONTEXT_WINDOW, len(tokens))):
        features[slot * size + tokens[-1 - slot]] = 1.0

    offset = CONTEXT_WINDOW * size
    for slot in range(min(QUERY_SLOTS, query_len)):
        features[offset + slot * size + tokens[slot]] = 1.0

    offset += QUERY_SLOTS * size
    features[offset] = (len(tokens) - query_len) / max_len

    offset += 1
    for token in tokens:
        features[offset + ROLE_ORDER.index(vocab.role(token))] += 1.0 / max_len

    offset += len(ROLE_ORDER)
    mode, since, calls = episode_phase(vocab, tokens, query_len)
    features[offset + (mode * PHASE_CAP + since) * PHASE_CAP + calls] = 1.0

    offset += len(PHASE_MODES) * PHASE_CAP * PHASE_CAP
    mode_name = PHASE_MODES[mode]
    if mode_name in COPY_MODES:
        phase = (COPY_MODES.index(mode_name) * PHASE_CAP + since) * PHASE_CAP + calls
        block = offset + phase * len(COPY_SOURCES) * vocab.n_digits
        for source, digit in enumerate(copy_sources(vocab, tokens, query_len)):
            if digit is not None:
                features[block + source * vocab.n_digits + digit] = 1.0

    features[-1] = 1.0

    norm = float(np.linalg.norm(features))
    if norm > cap:
        features *= cap / norm
    return features


def logits(params: PolicyParams, state: Vector) -> Vector:
    """Logits ``z = W s``."""
    if state.shape != (params.feature_dim,):
        raise ConfigError(
            f"state has shape {state.shape}, expected ({params.feature_dim},)"
        )
    return params.weights @ state


def softmax(z: Vector, temperature: float = 1.0) -> Vector:
    """Temperature softmax with max-subtraction."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if np.any(np.isnan(z)):
        raise NumericError("NaN in logits")
    scaled = z / temperature
    scaled = scaled - np.max(scaled)
    e = np.exp(scaled)
    p = e / np.sum(e)
    return np.maximum(p, PROB_FLOOR)


def log_softmax(z: Vector, temperature: float = 1.0) -> Vector:
    if np.any(np.isnan(z)):
        raise NumericError("NaN in logits")
    scaled = z / temperature
    shifted = scaled - np.max(scaled)
    out = shifted - np.log(np.sum(np.exp(shifted)))
    return np.maximum(out, LOG_PROB_FLOOR)


def token_distribution(params: PolicyParams, state: Vector, temperature: float) -> Vector:
    return softmax(logits(params, state), temperature)


def token_entropy(p: Vector) -> float:
    """Shannon entropy in nats, with 0 * log 0 taken as 0."""
    positive = p > 0
    h = -float(np.sum(p[positive] * np.log(p[positive])))
    return min(max(h, 0.0), float(np.log(p.size)))


def sample_token(p: Vector, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side="right")), p.size - 1)


def log_prob(params: PolicyParams, state: Vector, temperature: float, token: int) -> float:
    if not 0 <= token < params.vocab_size:
        raise UsageError(f"token {token} out of range [0, {params.vocab_size})")
    return float(log_softmax(logits(params, state), temperature)[token])


def score_function(
    params: PolicyParams, state: Vector, temperature: float, token: int
) -> Matrix:
    """Gradient of ``log pi(token | state)`` with respect to the weights.

    Closed form: ``((one_hot(token) - p) / temperature) outer state``.
    """
    if not 0 <= token < params.vocab_size:
        raise UsageError(f"token {token} out of range [0, {params.vocab_size})")
    p = token_distribution(params, state, temperature)
    direction = -p
    direction[token] += 1.0
    return np.outer(direction / temperature, state)


def kl_gradient(
    params: PolicyParams, state: Vector, temperature: float, reference: PolicyParams
) -> Matrix:
    """Gradient of ``KL(pi_params || pi_reference)`` at one state.

    With ``p`` and ``q`` the two distributions, the logit gradient is
    ``p * (log p - log q - KL) / temperature``; the weight gradient is its
    outer product with the state.
    """
    log_p = log_softmax(logits(params, state), temperature)
    log_q = log_softmax(logits(reference, state), temperature)
    p = np.exp(log_p)
    kl = float(np.sum(p * (log_p - log_q)))
    direction = p * (log_p - log_q - kl) / temperature
    return np.outer(direction, state)


def save_checkpoint(params: PolicyParams, path: Path) -> None:
    """Write params as a text header followed by little-endian float64 values."""
    rows, cols = params.weights.shape
    header = f"{CHECKPOINT_MAGIC} V={rows} F={cols}\n".encode("ascii")
    payload = np.ascontiguousarray(params.weights, dtype="<f8").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise StorageError(f"Failed to write checkpoint {path}: {e}") from e
    logger.debug(f"Saved policy V={rows} F={cols} to {path}")


def load_checkpoint(path: Path) -> PolicyParams:
    try:
        with open(path, "rb") as f:
            header = f.readline().decode("ascii", errors="replace").rstrip("\n")
            payload = f.read()
    except OSError as e:
        raise StorageError(f"Failed to read checkpoint {path}: {e}") from e

    match = _HEADER_RE.match(header)
    if not match:
        raise StorageError(f"{path}: not a policy checkpoint (header {header!r})")
    rows, cols = int(match.group(1)), int(match.group(2))
    if len(payload) != rows * cols * 8:
        raise StorageError(f"{path}: expected {rows * cols * 8} payload bytes, got {len(payload)}")

    weights = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return PolicyParams(weights)
