"""Clipped policy-gradient update rules.

Each rule is characterized by its gradient factor ``F(delta, adv)``: the
per-token gradient is ``F * adv * score``. AEPO keeps the clipped forward
value of GRPO but rescales the upper clip bound by ``delta / sg(delta)`` so
tokens above ``1 + eps_high`` with positive advantage keep a gradient of
``1 + eps_high`` instead of zero.

Stop-gradient values are modeled by an optional ``frozen`` parameter set:
when given, every ``sg(.)`` is evaluated under the frozen parameters, which
makes the surrogate an ordinary differentiable function whose gradient at
the frozen point equals the analytic one.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from aepo_desk.errors import ConfigError, NumericError, UsageError
from aepo_desk.policy.advantages import GroupAdvantages
from aepo_desk.policy.core import (
    DEFAULT_TEMPERATURE,
    LOG_PROB_FLOOR,
    Matrix,
    PolicyParams,
    Vector,
)
from aepo_desk.world.env import Trajectory

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

RATIO_CAP = 1e6
LOG_RATIO_CAP = math.log(RATIO_CAP)
TOP_CLIPPED = 10
DAPO_EPS_HIGH = 0.28


class Variant(str, Enum):
    AEPO = "aepo"
    GRPO = "grpo"
    DAPO = "dapo"
    CISPO = "cispo"
    GPPO = "gppo"


def parse_variant(name: str | Variant) -> Variant:
    if isinstance(name, Variant):
        return name
    try:
        return Variant(str(name).strip().lower())
    except ValueError:
        choices = ", ".join(v.value for v in Variant)
        raise ConfigError(f"Unknown update rule {name!r} (choose from {choices})") from None


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_low < 1.0:
            raise ConfigError(f"eps_low must be in (0, 1), got {self.eps_low}")
        if not self.eps_high > 0.0:
            raise ConfigError(f"eps_high must be > 0, got {self.eps_high}")

    @property
    def lower(self) -> float:
        return 1.0 - self.eps_low

    @property
    def upper(self) -> float:
        return 1.0 + self.eps_high


@dataclass(frozen=True)
class UpdateRule:
    """Variant plus its constants. GPPO betas are set iff the variant is GPPO."""

    variant: Variant
    clip: ClipConfig = field(default_factory=ClipConfig)
    gppo_beta1: float | None = None
    gppo_beta2: float | None = None
    kl_coef: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", parse_variant(self.variant))
        has_betas = self.gppo_beta1 is not None and self.gppo_beta2 is not None
        if self.variant is Variant.GPPO and not has_betas:
            raise ConfigError("gppo rule needs gppo_beta1 and gppo_beta2")
        if self.variant is not Variant.GPPO and (
            self.gppo_beta1 is not None or self.gppo_beta2 is not None
        ):
            raise ConfigError(f"gppo betas given for rule {self.variant.value}")
        if self.kl_coef < 0:
            raise ConfigError(f"kl_coef must be >= 0, got {self.kl_coef}")

    @classmethod
    def build(
        cls,
        variant: str | Variant,
        eps_low: float = 0.2,
        eps_high: float | None = None,
        gppo_beta1: float = 1.0,
        gppo_beta2: float = 1.0,
        kl_coef: float = 0.0,
    ) -> "UpdateRule":
        """Rule with defaults filled in (DAPO's clip-higher bound when unset)."""
        variant = parse_variant(variant)
        if eps_high is None:
            eps_high = DAPO_EPS_HIGH if variant is Variant.DAPO else 0.2
        gppo = variant is Variant.GPPO
        return cls(
            variant=variant,
            clip=ClipConfig(eps_low, eps_high),
            gppo_beta1=gppo_beta1 if gppo else None,
            gppo_beta2=gppo_beta2 if gppo else None,
            kl_coef=kl_coef,
        )

    @property
    def name(self) -> str:
        return self.variant.value


@dataclass(frozen=True)
class TokenUpdateRecord:
    delta: float
    advantage: float
    factor: float
    clipped: bool
    zeroed: bool


def importance_ratio(new_log_prob: float, old_log_prob: float) -> tuple[float, bool]:
    """``exp(new - old)``, capped at 1e6. Returns ``(delta, overflowed)``."""
    delta, overflow = importance_ratios(np.array([new_log_prob]), np.array([old_log_prob]))
    return float(delta[0]), bool(overflow[0])


def importance_ratios(new: Array, old: Array) -> tuple[Array, NDArray[np.bool_]]:
    new = np.asarray(new, dtype=np.float64)
    old = np.asarray(old, dtype=np.float64)
    if not (np.all(np.isfinite(new)) and np.all(np.isfinite(old))):
        raise NumericError("non-finite log-probability in importance ratio")
    log_ratio = new - old
    overflow = log_ratio > LOG_RATIO_CAP
    delta = np.exp(np.minimum(log_ratio, LOG_RATIO_CAP))
    return delta, overflow


def _upper_region(delta: Array, adv: Array, clip: ClipConfig) -> NDArray[np.bool_]:
    return (delta > clip.upper) & (adv > 0)


def _lower_region(delta: Array, adv: Array, clip: ClipConfig) -> NDArray[np.bool_]:
    return (delta < clip.lower) & (adv < 0)


def gradient_factors(delta: Array, adv: Array, rule: UpdateRule) -> Array:
    """Vectorized :func:`gradient_factor`."""
    delta = np.asarray(delta, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    clip = rule.clip
    upper = _upper_region(delta, adv, clip)
    lower = _lower_region(delta, adv, clip)
    factor = delta.copy()
    variant = rule.variant

    if variant is Variant.AEPO:
        factor[upper] = clip.upper
        factor[lower] = 0.0
    elif variant in (Variant.GRPO, Variant.DAPO):
        factor[upper | lower] = 0.0
    elif variant is Variant.CISPO:
        factor = np.clip(delta, clip.lower, clip.upper)
    elif variant is Variant.GPPO:
        assert rule.gppo_beta1 is not None and rule.gppo_beta2 is not None
        factor[lower] = rule.gppo_beta1 * clip.lower
        factor[upper] = rule.gppo_beta2 * clip.upper
    else:
        raise ConfigError(f"Unknown update rule {variant!r}")
    return factor


def gradient_factor(delta: float, advantage: float, rule: UpdateRule) -> float:
    """Scalar ``F`` multiplying ``advantage * score`` in the token gradient.

    AEPO: ``1 + eps_high`` above the upper bound with positive advantage,
    0 below the lower bound with negative advantage, otherwise ``delta``.
    GRPO and DAPO: 0 in both clipped regions. CISPO: ``clip(delta)``
    regardless of sign. GPPO: ``beta1 * (1 - eps_low)`` and
    ``beta2 * (1 + eps_high)`` in the two clipped regions.
    """
    if not delta > 0:
        raise UsageError(f"importance ratio must be > 0, got {delta}")
    return float(gradient_factors(np.array([delta]), np.array([advantage]), rule)[0])


def surrogates(
    delta: Array,
    adv: Array,
    rule: UpdateRule,
    frozen_delta: Array | None = None,
    log_prob: Array | None = None,
) -> Array:
    """Vectorized per-token surrogate values.

    ``frozen_delta`` holds the stop-gradient copies of ``delta``; it defaults
    to ``delta`` itself, which is the ordinary forward pass.
    """
    delta = np.asarray(delta, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    sg = delta if frozen_delta is None else np.asarray(frozen_delta, dtype=np.float64)
    clip = rule.clip
    variant = rule.variant

    if variant in (Variant.GRPO, Variant.DAPO):
        clipped = np.minimum(np.maximum(delta, clip.lower), clip.upper)
        return np.minimum(delta * adv, clipped * adv)

    if variant is Variant.AEPO:
        # (delta / sg) is exactly 1.0 on the forward pass
        upper = clip.upper * (delta / sg)
        clipped = np.minimum(np.maximum(delta, clip.lower), upper)
        return np.minimum(delta * adv, clipped * adv)

    if variant is Variant.CISPO:
        if log_prob is None:
            raise UsageError("cispo surrogate needs the current log-probabilities")
        return np.clip(sg, clip.lower, clip.upper) * adv * np.asarray(log_prob)

    if variant is Variant.GPPO:
        assert rule.gppo_beta1 is not None and rule.gppo_beta2 is not None
        out = delta * adv
        lower = _lower_region(sg, adv, clip)
        upper = _upper_region(sg, adv, clip)
        ratio = delta / sg
        out = np.where(lower, rule.gppo_beta1 * clip.lower * ratio * adv, out)
        out = np.where(upper, rule.gppo_beta2 * clip.upper * ratio * adv, out)
        return out

    raise ConfigError(f"Unknown update rule {variant!r}")


def surrogate_value(
    delta: float,
    advantage: float,
    rule: UpdateRule,
    log_prob: float | None = None,
) -> float:
    """Forward value of one token's surrogate term."""
    if not delta > 0:
        raise UsageError(f"importance ratio must be > 0, got {delta}")
    lp = None if log_prob is None else np.array([log_prob])
    return float(surrogates(np.array([delta]), np.array([advantage]), rule, log_prob=lp)[0])


def token_gradient(factor: float, score: Matrix, advantage: float) -> Matrix:
    return (factor * advantage) * score


def kl_penalty(p: Vector, q: Vector) -> float:
    """Categorical ``KL(p || q)`` in nats, summed over the vocabulary."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise UsageError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    positive = p > 0
    kl = float(np.sum(p[positive] * (np.log(p[positive]) - np.log(q[positive]))))
    return max(kl, 0.0)


@dataclass(frozen=True)
class TokenBatch:
    """Unmasked tokens of one training step, in canonical order.

    Rows are ordered by group (query), then trajectory id, then token index.
    """

    states: Array
    tokens: NDArray[np.int64]
    old_log_probs: Array
    advantages: Array
    entropies: Array
    groups: NDArray[np.int64]
    temperature: float = DEFAULT_TEMPERATURE

    def __len__(self) -> int:
        return int(self.tokens.size)

    def subset(self, rows: NDArray[np.int64] | slice) -> "TokenBatch":
        return TokenBatch(
            states=self.states[rows],
            tokens=self.tokens[rows],
            old_log_probs=self.old_log_probs[rows],
            advantages=self.advantages[rows],
            entropies=self.entropies[rows],
            groups=self.groups[rows],
            temperature=self.temperature,
        )

    @classmethod
    def from_groups(
        cls,
        groups: Sequence[Sequence[Trajectory]],
        advantages: Sequence[GroupAdvantages],
        encode: Callable[[Sequence[int], int], Vector],
        temperature: float = DEFAULT_TEMPERATURE,
    ) -> "TokenBatch":
        """Flatten trajectories into token rows.

        Args:
            groups: One trajectory list per query
            advantages: Matching per-group advantages
            encode: ``encode(visible_tokens, query_len)`` feature encoder
            temperature: Decoding temperature used at rollout time
        """
        if len(groups) != len(advantages):
            raise UsageError(f"{len(groups)} groups but {len(advantages)} advantage sets")

        states: list[Vector] = []
        tokens: list[int] = []
        old: list[float] = []
        adv: list[float] = []
        ent: list[float] = []
        group_ids: list[int] = []

        for g, (trajectories, group_adv) in enumerate(zip(groups, advantages)):
            order = sorted(range(len(trajectories)), key=lambda i: trajectories[i].traj_id)
            for i in order:
                trajectory = trajectories[i]
                visible = list(trajectory.prompt)
                query_len = len(trajectory.prompt)
                for t, token in enumerate(trajectory.tokens):
                    if trajectory.loss_mask[t]:
                        states.append(encode(visible, query_len))
                        tokens.append(token)
                        old.append(trajectory.old_log_probs[t])
                        adv.append(float(group_adv.reshaped[i][t]))
                        ent.append(trajectory.entropies[t])
                        group_ids.append(g)
                    visible.append(token)

        if not tokens:
            raise UsageError("empty token batch")

        return cls(
            states=np.vstack(states),
            tokens=np.asarray(tokens, dtype=np.int64),
            old_log_probs=np.asarray(old, dtype=np.float64),
            advantages=np.asarray(adv, dtype=np.float64),
            entropies=np.asarray(ent, dtype=np.float64),
            groups=np.asarray(group_ids, dtype=np.int64),
            temperature=temperature,
        )


def _log_softmax_rows(params: PolicyParams, states: Array, temperature: float) -> Array:
    scaled = (states @ params.weights.T) / temperature
    if np.any(np.isnan(scaled)):
        raise NumericError("NaN in logits")
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return np.maximum(out, LOG_PROB_FLOOR)


def _token_log_probs(log_probs: Array, tokens: NDArray[np.int64]) -> Array:
    return log_probs[np.arange(tokens.size), tokens]


def batch_objective(
    params: PolicyParams,
    batch: TokenBatch,
    rule: UpdateRule,
    frozen: PolicyParams | None = None,
    reference: PolicyParams | None = None,
) -> float:
    """Mean surrogate over the batch minus ``kl_coef`` times the mean KL.

    Args:
        params: Parameters the objective is evaluated at
        batch: Token rows
        rule: Update rule
        frozen: Parameters for stop-gradient values (defaults to ``params``)
        reference: Reference policy for the KL term (ignored when kl_coef is 0)
    """
    if len(batch) == 0:
        raise UsageError("empty token batch")
    log_probs = _log_softmax_rows(params, batch.states, batch.temperature)
    new = _token_log_probs(log_probs, batch.tokens)
    delta, _ = importance_ratios(new, batch.old_log_probs)

    frozen_delta = None
    if frozen is not None:
        frozen_lp = _log_softmax_rows(frozen, batch.states, batch.temperature)
        frozen_delta, _ = importance_ratios(
            _token_log_probs(frozen_lp, batch.tokens), batch.old_log_probs
        )

    values = surrogates(delta, batch.advantages, rule, frozen_delta, new)
    objective = math.fsum(values) / len(batch)

    if rule.kl_coef > 0 and reference is not None:
        ref_lp = _log_softmax_rows(reference, batch.states, batch.temperature)
        kl = np.sum(np.exp(log_probs) * (log_probs - ref_lp), axis=1)
        objective -= rule.kl_coef * math.fsum(kl) / len(batch)
    return objective


FactorFn = Callable[[Array, Array, UpdateRule], Array]


def batch_gradient(
    params: PolicyParams,
    batch: TokenBatch,
    rule: UpdateRule,
    reference: PolicyParams | None = None,
    factor_fn: FactorFn = gradient_factors,
) -> Matrix:
    """Analytic gradient of :func:`batch_objective` with ``frozen = params``.

    Equals ``(1/N) * sum_j F_j * adv_j * score_j`` minus the KL gradient.
    """
    if len(batch) == 0:
        raise UsageError("empty token batch")
    tau = batch.temperature
    log_probs = _log_softmax_rows(params, batch.states, tau)
    probs = np.exp(log_probs)
    new = _token_log_probs(log_probs, batch.tokens)
    delta, _ = importance_ratios(new, batch.old_log_probs)
    factors = factor_fn(delta, batch.advantages, rule)

    weights = factors * batch.advantages / len(batch)
    direction = -probs * weights[:, None]
    direction[np.arange(len(batch)), batch.tokens] += weights
    grad: Matrix = (direction / tau).T @ batch.states

    if rule.kl_coef > 0 and reference is not None:
        ref_lp = _log_softmax_rows(reference, batch.states, tau)
        diff = log_probs - ref_lp
        kl = np.sum(probs * diff, axis=1, keepdims=True)
        kl_direction = probs * (diff - kl) / tau
        grad = grad - (rule.kl_coef / len(batch)) * (kl_direction.T @ batch.states)
    return grad


@dataclass
class UpdateReport:
    rule: str
    step: int = 0
    loss: float = 0.0
    n_tokens: int = 0
    zeroed_frac: float = 0.0
    shadow_zeroed_frac: float = 0.0
    upper_clip_frac: float = 0.0
    lower_clip_frac: float = 0.0
    nonzero_grad_tokens: int = 0
    mean_delta: float = 1.0
    first_minibatch_max_dev: float = 0.0
    overflow_count: int = 0
    mean_entropy: float = 0.0
    top_clipped: list[tuple[int, float, float]] = field(default_factory=list)

    def to_record(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "rule": self.rule,
            "loss": self.loss,
            "n_tokens": self.n_tokens,
            "zeroed_frac": self.zeroed_frac,
            "shadow_zeroed_frac": self.shadow_zeroed_frac,
            "upper_clip_frac": self.upper_clip_frac,
            "lower_clip_frac": self.lower_clip_frac,
            "nonzero_grad_tokens": self.nonzero_grad_tokens,
            "mean_delta": self.mean_delta,
            "first_minibatch_max_dev": self.first_minibatch_max_dev,
            "overflow_count": self.overflow_count,
            "mean_entropy": self.mean_entropy,
            "top_clipped": [list(item) for item in self.top_clipped],
        }


def token_records(
    params: PolicyParams, batch: TokenBatch, rule: UpdateRule
) -> list[TokenUpdateRecord]:
    """Per-token ``(delta, adv, F)`` with clip flags at ``params``."""
    log_probs = _log_softmax_rows(params, batch.states, batch.temperature)
    delta, _ = importance_ratios(_token_log_probs(log_probs, batch.tokens), batch.old_log_probs)
    factors = gradient_factors(delta, batch.advantages, rule)
    clipped = _upper_region(delta, batch.advantages, rule.clip) | _lower_region(
        delta, batch.advantages, rule.clip
    )
    return [
        TokenUpdateRecord(float(d), float(a), float(f), bool(c), bool(f == 0.0))
        for d, a, f, c in zip(delta, batch.advantages, factors, clipped)
    ]


def _chunks(batch: TokenBatch, minibatches: int) -> list[TokenBatch]:
    """Contiguous chunks that never split a group."""
    unique = np.unique(batch.groups)
    parts = np.array_split(unique, min(max(minibatches, 1), unique.size))
    chunks = []
    for part in parts:
        rows = np.flatnonzero(np.isin(batch.groups, part))
        chunks.append(batch.subset(rows))
    return chunks


def batch_update(
    params: PolicyParams,
    batch: TokenBatch,
    rule: UpdateRule,
    lr: float,
    minibatches: int = 1,
    epochs: int = 1,
    reference: PolicyParams | None = None,
    factor_fn: FactorFn = gradient_factors,
) -> tuple[PolicyParams, UpdateReport]:
    """Gradient ascent over mini-batches of one step's tokens.

    Each chunk is normalized by its own token count. Clip statistics are
    pooled over every chunk visit.
    """
    if len(batch) == 0:
        raise UsageError("empty token batch")
    if not lr > 0:
        raise ConfigError(f"lr must be > 0, got {lr}")
    if epochs < 1:
        raise ConfigError(f"update_epochs must be >= 1, got {epochs}")

    shadow_rule = UpdateRule(Variant.GRPO, rule.clip)
    weights = params.weights.copy()
    deltas: list[Array] = []
    advs: list[Array] = []
    factor_list: list[Array] = []
    shadow_zeroed = 0
    overflow = 0
    losses: list[float] = []
    clipped_rows: list[tuple[int, float, float]] = []
    first_dev = 0.0

    chunks = _chunks(batch, minibatches)
    for epoch in range(epochs):
        for index, chunk in enumerate(chunks):
            current = PolicyParams(weights)
            log_probs = _log_softmax_rows(current, chunk.states, chunk.temperature)
            new = _token_log_probs(log_probs, chunk.tokens)
            delta, over = importance_ratios(new, chunk.old_log_probs)
            factors = factor_fn(delta, chunk.advantages, rule)

            if epoch == 0 and index == 0:
                first_dev = float(np.max(np.abs(delta - 1.0)))

            deltas.append(delta)
            advs.append(chunk.advantages)
            factor_list.append(factors)
            shadow = gradient_factors(delta, chunk.advantages, shadow_rule)
            shadow_zeroed += int(np.sum(shadow == 0))
            overflow += int(over.sum())

            clipped = _upper_region(delta, chunk.advantages, rule.clip) | _lower_region(
                delta, chunk.advantages, rule.clip
            )
            for row in np.flatnonzero(clipped):
                clipped_rows.append(
                    (int(chunk.tokens[row]), float(delta[row]), float(chunk.advantages[row]))
                )

            losses.append(batch_objective(current, chunk, rule, reference=reference))
            grad = batch_gradient(current, chunk, rule, reference, factor_fn)
            weights = weights + lr * grad

    if not np.all(np.isfinite(weights)):
        raise NumericError("policy update produced non-finite weights")

    all_delta = np.concatenate(deltas)
    all_adv = np.concatenate(advs)
    all_factor = np.concatenate(factor_list)
    total = all_delta.size
    clipped_rows.sort(key=lambda item: -abs(item[1] - 1.0))

    report = UpdateReport(
        rule=rule.name,
        loss=float(np.mean(losses)),
        n_tokens=len(batch),
        zeroed_frac=float(np.sum(all_factor == 0)) / total,
        shadow_zeroed_frac=shadow_zeroed / total,
        upper_clip_frac=float(np.sum(_upper_region(all_delta, all_adv, rule.clip))) / total,
        lower_clip_frac=float(np.sum(_lower_region(all_delta, all_adv, rule.clip))) / total,
        nonzero_grad_tokens=int(np.sum(all_factor != 0)),
        mean_delta=float(all_delta.mean()),
        first_minibatch_max_dev=first_dev,
        overflow_count=overflow,
        mean_entropy=float(batch.entropies.mean()),
        top_clipped=clipped_rows[:TOP_CLIPPED],
    )
    logger.debug(
        f"{rule.name}: tokens={len(batch)} loss={report.loss:.5f} "
        f"zeroed={report.zeroed_frac:.4f} shadow={report.shadow_zeroed_frac:.4f}"
    )
    return PolicyParams(weights), report
