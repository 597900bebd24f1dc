"""Token policies the rollout engine can drive."""

from typing import Callable, Protocol, Sequence

import numpy as np

from aepo_desk.errors import ConfigError
from aepo_desk.policy import core
from aepo_desk.policy.core import PolicyParams, Vector
from aepo_desk.world.env import EpisodeState, Task
from aepo_desk.world.tasks import solve
from aepo_desk.world.vocab import Vocabulary

EntropySchedule = Callable[[EpisodeState], float]


class Policy(Protocol):
    def token_distribution(self, episode: EpisodeState) -> Vector: ...

    def token_entropy(self, episode: EpisodeState, p: Vector) -> float: ...

    def sample(self, episode: EpisodeState, p: Vector, rng: np.random.Generator) -> int: ...


class LinearPolicy:
    """Softmax policy over ``encode_state`` features."""

    def __init__(
        self,
        params: PolicyParams,
        vocab: Vocabulary,
        temperature: float = core.DEFAULT_TEMPERATURE,
        max_len: int = 64,
        feature_cap: float = 4.0,
    ):
        if params.vocab_size != vocab.size:
            raise ConfigError(
                f"policy has {params.vocab_size} rows but vocabulary has {vocab.size} tokens"
            )
        self.params = params
        self.vocab = vocab
        self.temperature = temperature
        self.max_len = max_len
        self.feature_cap = feature_cap

    def features(self, episode: EpisodeState) -> Vector:
        return core.encode_state(
            self.vocab, episode.tokens, episode.query_len, self.max_len, self.feature_cap
        )

    def token_distribution(self, episode: EpisodeState) -> Vector:
        return core.token_distribution(self.params, self.features(episode), self.temperature)

    def token_entropy(self, episode: EpisodeState, p: Vector) -> float:
        return core.token_entropy(p)

    def sample(self, episode: EpisodeState, p: Vector, rng: np.random.Generator) -> int:
        return core.sample_token(p, rng)


class ScriptedPolicy:
    """Plays the optimal token sequence and reports entropies from a schedule.

    ``entropy`` is either a constant or a callable of the current episode
    state, which lets tests force high or low entropy after specific tool
    calls. Sampling ignores the rng.
    """

    def __init__(
        self,
        task: Task,
        vocab: Vocabulary,
        entropy: float | EntropySchedule = 0.0,
        script: Sequence[int] | None = None,
    ):
        self.vocab = vocab
        self.script = list(script) if script is not None else solve(task, vocab)
        self._entropy = entropy

    def _next_token(self, episode: EpisodeState) -> int:
        generated = sum(episode.mask)
        if generated < len(self.script):
            return self.script[generated]
        return self.vocab.end

    def token_distribution(self, episode: EpisodeState) -> Vector:
        p = np.full(self.vocab.size, core.PROB_FLOOR)
        p[self._next_token(episode)] = 1.0
        return p

    def token_entropy(self, episode: EpisodeState, p: Vector) -> float:
        if callable(self._entropy):
            return float(self._entropy(episode))
        return float(self._entropy)

    def sample(self, episode: EpisodeState, p: Vector, rng: np.random.Generator) -> int:
        return self._next_token(episode)
