"""Numeric oracle suites.

Every suite recomputes a quantity independently (finite differences,
extended precision, exhaustive enumeration, brute-force recomputation) and
reports the largest error it measured next to its tolerance. ``mutate``
swaps in a corrupted AEPO gradient factor as a negative control.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from aepo_desk.errors import OracleFailure, UsageError
from aepo_desk.policy import core
from aepo_desk.policy.advantages import (
    accuracy_advantage,
    entropy_advantage,
    reshape_advantage,
)
from aepo_desk.policy.core import PolicyParams
from aepo_desk.policy.update import (
    FactorFn,
    TokenBatch,
    UpdateRule,
    Variant,
    batch_gradient,
    batch_objective,
    gradient_factors,
    kl_penalty,
    surrogates,
)
from aepo_desk.rollout.engine import (
    DecideMode,
    RolloutConfig,
    RolloutMode,
    allocate_budget,
    branch_probability,
    premonitor,
    rollout,
)
from aepo_desk.rollout.entropy import build_trace
from aepo_desk.rollout.policies import LinearPolicy, Policy, ScriptedPolicy
from aepo_desk.trainer import pass_at_k
from aepo_desk.world.env import Event, ToolWorld, Trajectory
from aepo_desk.world.tasks import generate_task, solve, task_seed
from aepo_desk.world.vocab import Vocabulary

logger = logging.getLogger(__name__)

Rng = np.random.Generator

FD_STEP = 1e-5
GRADIENT_BATCHES = 100
BOUNDARY_GAP = 0.02
MUTATION_SCALE = 1.5


@dataclass(frozen=True)
class OracleResult:
    suite: str
    error: float
    tolerance: float
    cases: int
    detail: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.error) and self.error <= self.tolerance

    def to_record(self) -> dict[str, Any]:
        return {
            "suite": self.suite,
            "error": self.error,
            "tolerance": self.tolerance,
            "cases": self.cases,
            "passed": self.passed,
            "detail": self.detail,
        }


@dataclass
class VerifyReport:
    results: list[OracleResult] = field(default_factory=list)
    mutated: bool = False

    @property
    def failed(self) -> list[OracleResult]:
        return [r for r in self.results if not r.passed]

    @property
    def passed(self) -> bool:
        return not self.failed


def mutated_factors(delta: Any, adv: Any, rule: UpdateRule) -> Any:
    """AEPO factor with the upper-region value scaled; a deliberately wrong gradient."""
    factors = gradient_factors(delta, adv, rule)
    if rule.variant is Variant.AEPO:
        upper = (np.asarray(delta) > rule.clip.upper) & (np.asarray(adv) > 0)
        factors[upper] *= MUTATION_SCALE
    return factors


def _relative_error(analytic: Any, numeric: Any) -> float:
    scale = max(float(np.linalg.norm(numeric)), float(np.linalg.norm(analytic)), 1e-8)
    return float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))) / scale


def _finite_difference(fn: Callable[[Any], float], weights: Any, h: float = FD_STEP) -> Any:
    grad = np.zeros_like(weights)
    for index in np.ndindex(weights.shape):
        plus = weights.copy()
        minus = weights.copy()
        plus[index] += h
        minus[index] -= h
        grad[index] = (fn(plus) - fn(minus)) / (2.0 * h)
    return grad


def _rule(variant: Variant, kl_coef: float = 0.0) -> UpdateRule:
    return UpdateRule.build(variant, gppo_beta1=0.7, gppo_beta2=1.3, kl_coef=kl_coef)


def _ratios_away_from_bounds(rng: Rng, n: int, rule: UpdateRule, low: float, high: float) -> Any:
    bounds = (rule.clip.lower, rule.clip.upper)
    delta = rng.uniform(low, high, n)
    while True:
        close = np.zeros(n, dtype=bool)
        for bound in bounds:
            close |= np.abs(delta - bound) < BOUNDARY_GAP
        if not close.any():
            return delta
        delta[close] = rng.uniform(low, high, int(close.sum()))


def _random_batch(
    rng: Rng,
    rule: UpdateRule,
    vocab_size: int = 4,
    dim: int = 5,
    n_tokens: int = 8,
    ratio_range: tuple[float, float] = (0.3, 2.0),
) -> tuple[PolicyParams, TokenBatch]:
    """Random params and a token batch whose ratios at those params are chosen directly."""
    temperature = 0.6
    params = PolicyParams(rng.normal(0.0, 0.5, size=(vocab_size, dim)))
    states = rng.normal(0.0, 1.0, size=(n_tokens, dim))
    tokens = rng.integers(0, vocab_size, size=n_tokens).astype(np.int64)
    new = np.array(
        [core.log_prob(params, s, temperature, int(t)) for s, t in zip(states, tokens)]
    )
    delta = _ratios_away_from_bounds(rng, n_tokens, rule, *ratio_range)
    adv = rng.uniform(0.1, 2.0, n_tokens) * rng.choice([-1.0, 1.0], n_tokens)
    batch = TokenBatch(
        states=states,
        tokens=tokens,
        old_log_probs=new - np.log(delta),
        advantages=adv,
        entropies=np.zeros(n_tokens),
        groups=np.zeros(n_tokens, dtype=np.int64),
        temperature=temperature,
    )
    return params, batch


# Suites


def check_softmax_normalization(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    worst = 0.0
    cases = 1000
    for _ in range(cases):
        z = rng.normal(0.0, rng.uniform(0.1, 50.0), size=int(rng.integers(2, 40)))
        p = core.softmax(z, float(rng.uniform(0.05, 3.0)))
        worst = max(worst, abs(math.fsum(p) - 1.0), float(-min(p.min(), 0.0)))
    return OracleResult("softmax_normalization", worst, 1e-12, cases)


def check_sampler_frequencies(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    draws = 100_000
    p = rng.dirichlet(np.ones(6))
    counts = np.zeros(p.size)
    for _ in range(draws):
        counts[core.sample_token(p, rng)] += 1
    sigma = np.sqrt(p * (1.0 - p) / draws)
    z = float(np.max(np.abs(counts / draws - p) / sigma))
    # six simultaneous comparisons at a fixed seed
    return OracleResult("sampler_frequencies", z, 4.0, draws, "max |freq - p| in binomial sigmas")


def _decimal_log_prob(weights: Any, state: Any, temperature: float, token: int) -> Decimal:
    with localcontext() as ctx:
        ctx.prec = 50
        tau = Decimal(temperature)
        z = [
            sum((Decimal(float(w)) * Decimal(float(s)) for w, s in zip(row, state)), Decimal(0))
            / tau
            for row in weights
        ]
        top = max(z)
        total = sum(((v - top).exp() for v in z), Decimal(0))
        return z[token] - top - total.ln()


def check_log_prob_precision(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    worst = 0.0
    cases = 200
    for _ in range(cases):
        params = PolicyParams(rng.normal(0.0, 2.0, size=(6, 7)))
        state = rng.normal(0.0, 1.0, size=7)
        token = int(rng.integers(0, 6))
        temperature = float(rng.uniform(0.2, 2.0))
        exact = _decimal_log_prob(params.weights, state, temperature, token)
        ours = core.log_prob(params, state, temperature, token)
        worst = max(worst, abs(float(Decimal(ours) - exact)))
    return OracleResult("log_prob_extended_precision", worst, 1e-10, cases)


def check_score_function(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    worst = 0.0
    cases = 100
    temperature = 0.6
    for _ in range(cases):
        params = PolicyParams(rng.normal(0.0, 0.5, size=(6, 7)))
        state = rng.normal(0.0, 1.0, size=7)
        token = int(rng.integers(0, 6))
        analytic = core.score_function(params, state, temperature, token)
        numeric = _finite_difference(
            lambda w: core.log_prob(PolicyParams(w), state, temperature, token), params.weights
        )
        worst = max(worst, _relative_error(analytic, numeric))
    return OracleResult("score_finite_difference", worst, 1e-6, cases)


def check_forward_invariance(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    cases = 10_000
    delta = 5.0 * (1.0 - rng.random(cases))
    adv = rng.uniform(-3.0, 3.0, cases)
    aepo = surrogates(delta, adv, _rule(Variant.AEPO))
    grpo = surrogates(delta, adv, _rule(Variant.GRPO))
    mismatched = int(np.sum(aepo != grpo))
    error = float(np.max(np.abs(aepo - grpo)))
    return OracleResult(
        "forward_invariance", error, 0.0, cases, f"{mismatched} values differ from GRPO"
    )


def _expected_factor(rule: UpdateRule, delta: float, adv: float) -> float:
    lower, upper = rule.clip.lower, rule.clip.upper
    in_upper = delta > upper and adv > 0
    in_lower = delta < lower and adv < 0
    if rule.variant is Variant.AEPO:
        return upper if in_upper else 0.0 if in_lower else delta
    if rule.variant in (Variant.GRPO, Variant.DAPO):
        return 0.0 if in_upper or in_lower else delta
    if rule.variant is Variant.CISPO:
        return min(max(delta, lower), upper)
    assert rule.gppo_beta1 is not None and rule.gppo_beta2 is not None
    if in_lower:
        return rule.gppo_beta1 * lower
    if in_upper:
        return rule.gppo_beta2 * upper
    return delta


def check_factor_tables(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    worst = 0.0
    cases = 0
    for variant in Variant:
        rule = _rule(variant)
        lower, upper = rule.clip.lower, rule.clip.upper
        deltas = [lower - 1e-6, lower + 1e-6, upper - 1e-6, upper + 1e-6, 1.0]
        for delta, adv in itertools.product(deltas, (1.0, -1.0)):
            got = float(factor_fn(np.array([delta]), np.array([adv]), rule)[0])
            worst = max(worst, abs(got - _expected_factor(rule, delta, adv)))
            cases += 1
    return OracleResult("gradient_factor_tables", worst, 0.0, cases)


def check_frozen_gradient(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    """Analytic gradient against finite differences of the stop-gradient-frozen surrogate."""
    rules = [_rule(v) for v in Variant] + [_rule(Variant.AEPO, kl_coef=0.1)]
    worst = 0.0
    worst_rule = ""
    cases = 0
    for _ in range(GRADIENT_BATCHES):
        for rule in rules:
            params, batch = _random_batch(rng, rule)
            reference = PolicyParams(params.weights + rng.normal(0.0, 0.3, params.weights.shape))
            analytic = batch_gradient(params, batch, rule, reference, factor_fn)
            numeric = _finite_difference(
                lambda w: batch_objective(PolicyParams(w), batch, rule, params, reference),
                params.weights,
            )
            error = _relative_error(analytic, numeric)
            if error > worst:
                worst, worst_rule = error, rule.name
            cases += 1
    return OracleResult("frozen_surrogate_gradient", worst, 1e-5, cases, f"worst rule {worst_rule}")


def check_stop_gradient_effect(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    """Plain finite differences of the AEPO forward loss recover the GRPO gradient."""
    aepo = _rule(Variant.AEPO)
    grpo = _rule(Variant.GRPO)
    worst = 0.0
    separated = 0
    for _ in range(GRADIENT_BATCHES):
        params, batch = _random_batch(rng, aepo)
        numeric = _finite_difference(
            lambda w: batch_objective(PolicyParams(w), batch, aepo), params.weights
        )
        worst = max(worst, _relative_error(batch_gradient(params, batch, grpo), numeric))
        analytic = batch_gradient(params, batch, aepo, factor_fn=factor_fn)
        if _relative_error(analytic, numeric) > 1e-5:
            separated += 1
    return OracleResult(
        "stop_gradient_effect",
        worst,
        1e-5,
        GRADIENT_BATCHES,
        f"{separated} batches where the AEPO gradient differs from plain differences",
    )


def check_aepo_grpo_continuity(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    """Inside the trust region the two rules produce the same gradient."""
    aepo = _rule(Variant.AEPO)
    grpo = _rule(Variant.GRPO)
    worst = 0.0
    cases = 200
    for _ in range(cases):
        params, batch = _random_batch(rng, aepo, ratio_range=(0.85, 1.15))
        a = batch_gradient(params, batch, aepo, factor_fn=factor_fn)
        g = batch_gradient(params, batch, grpo)
        worst = max(worst, float(np.max(np.abs(a - g))))
    return OracleResult("aepo_grpo_continuity", worst, 1e-15, cases)


def _random_rollout_config(rng: Rng) -> RolloutConfig:
    return RolloutConfig(
        k=int(rng.integers(2, 9)),
        beta_sens=float(rng.uniform(0.05, 2.0)),
        alpha_base=float(rng.uniform(0.0, 0.6)),
        gamma_ent=float(rng.uniform(0.0, 1.0)),
        lambda_pen=float(rng.uniform(0.0, 0.5)),
        tau_branch=float(rng.uniform(0.0, 0.4)),
        branch_width=int(rng.integers(1, 4)),
        root_window=int(rng.integers(1, 17)),
        decide_mode=list(DecideMode)[int(rng.integers(len(DecideMode)))],
        mode=list(RolloutMode)[int(rng.integers(len(RolloutMode)))],
    )


def _prefix_violations(trajectories: Sequence[Trajectory]) -> int:
    by_id = {t.traj_id: t for t in trajectories}
    violations = 0
    for child in trajectories:
        if child.lineage is None:
            continue
        parent = by_id.get(child.lineage.parent_id)
        if parent is None or child.lineage.branch_step >= parent.tool_calls:
            violations += 1
            continue
        cut = parent.tool_spans[child.lineage.branch_step][1]
        same = (
            child.tokens[:cut] == parent.tokens[:cut]
            and child.loss_mask[:cut] == parent.loss_mask[:cut]
            and child.old_log_probs[:cut] == parent.old_log_probs[:cut]
            and child.tool_spans[: child.lineage.branch_step + 1]
            == parent.tool_spans[: child.lineage.branch_step + 1]
        )
        violations += 0 if same else 1
    return violations


def check_budget_conservation(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    vocab = Vocabulary.build(16)
    cases = 200
    violations = 0
    branch_events = 0
    for index in range(cases):
        config = _random_rollout_config(rng)
        task = generate_task(vocab, int(rng.integers(1, 4)), task_seed(7, index))
        world = ToolWorld(task, vocab, max_len=24)
        policy: Policy
        if index % 2 == 0:
            schedule = rng.uniform(0.0, math.log(vocab.size), size=256)
            policy = ScriptedPolicy(task, vocab, entropy=lambda ep, s=schedule: s[len(ep.tokens)])
        else:
            params = PolicyParams.random(vocab.size, core.feature_dim(vocab), rng, scale=1.0)
            policy = LinearPolicy(params, vocab, 0.6, max_len=24)
        pool = rollout(policy, world, config, rng)
        ids = [t.traj_id for t in pool.trajectories]
        if len(pool.trajectories) != config.k or ids != list(range(config.k)):
            violations += 1
        violations += _prefix_violations(pool.trajectories)
        branch_events += len(pool.events)
    return OracleResult(
        "budget_conservation", float(violations), 0.0, cases, f"{branch_events} branch events"
    )


def _decimal_sigmoid(x: Decimal) -> Decimal:
    with localcontext() as ctx:
        ctx.prec = 50
        return 1 / (1 + (-x).exp())


def check_premonitor_allocation(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    violations = 0
    cases = 0

    expected = int(
        (16 * _decimal_sigmoid(Decimal("0.2") * (Decimal("0.2") - Decimal("0.6"))) + Decimal("0.5"))
        // 1
    )
    violations += allocate_budget(16, 0.2, 0.6, 0.2).m != expected
    cases += 1

    for k in range(2, 33, 2):
        h = float(rng.uniform(0.0, 3.0))
        violations += allocate_budget(k, h, h, float(rng.uniform(0.05, 2.0))).m != k // 2
        violations += allocate_budget(k, h, None, 0.2).m != k
        cases += 2

    gaps = np.linspace(-10.0, 10.0, 201)
    ms = [allocate_budget(16, float(g), 0.0, 0.5).m for g in gaps]
    violations += sum(1 for a, b in zip(ms, ms[1:]) if b < a)
    cases += len(gaps)

    vocab = Vocabulary.build(16)
    task = generate_task(vocab, 0, task_seed(3, 0))
    allocation, _ = premonitor(
        ScriptedPolicy(task, vocab, entropy=1.0), ToolWorld(task, vocab), RolloutConfig(k=8), rng
    )
    violations += allocation.m != 8
    cases += 1
    return OracleResult("premonitor_allocation", float(violations), 0.0, cases)


def check_branch_penalty(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    config = RolloutConfig()
    worst = 0.0
    cases = 0
    for delta_h in np.linspace(-0.9, 1.0, 39):
        previous = branch_probability(float(delta_h), 0, config)
        if previous <= 0:
            continue
        for run_length in range(1, 8):
            p = branch_probability(float(delta_h), run_length, config)
            if previous > 0 and not p < previous:
                worst = max(worst, 1.0)
            if previous == 0 and p != 0:
                worst = max(worst, 1.0)
            if run_length <= 5:
                damping = 1.0 - p / branch_probability(float(delta_h), 0, config)
                worst = max(worst, abs(damping - 0.2 * run_length))
            previous = p
            cases += 1
    return OracleResult("branch_penalty_law", worst, 1e-12, cases)


def _two_pass_standardize(values: Sequence[float]) -> list[float]:
    mean = math.fsum(values) / len(values)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / len(values))
    return [(v - mean) / std for v in values]


def check_advantage_normalization(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    worst = 0.0
    cases = 200
    for _ in range(cases):
        size = int(rng.integers(2, 12))
        rewards = rng.integers(0, 2, size).astype(float)
        if rng.random() < 0.5:
            rewards = rng.uniform(0.0, 1.0, size)
        acc = accuracy_advantage(rewards)
        worst = max(worst, abs(float(acc.mean())))
        if np.all(rewards == rewards[0]):
            worst = max(worst, float(np.max(np.abs(acc))))
        else:
            worst = max(worst, float(np.max(np.abs(acc - _two_pass_standardize(rewards)))))

        entropies = rng.uniform(0.0, 3.0, size + 3)
        mask = rng.random(size + 3) < 0.8
        mask[:2] = True
        ent = entropy_advantage(entropies, mask)
        kept = ent[mask]
        worst = max(worst, abs(float(kept.mean())), abs(float(kept.std()) - 1.0))
        worst = max(worst, float(np.max(np.abs(ent[~mask]))) if (~mask).any() else 0.0)

        token_acc = np.full(size + 3, acc[0])
        if np.any(reshape_advantage(token_acc, ent, 0.0) != token_acc):
            worst = max(worst, 1.0)
        a_weight = float(rng.uniform(0.0, 1.0))
        small = np.abs(a_weight * ent) < 1.0
        reshaped = reshape_advantage(token_acc, ent, a_weight)
        if np.any(np.sign(reshaped[small]) != np.sign(token_acc[small])):
            worst = max(worst, 1.0)
    return OracleResult("advantage_normalization", worst, 1e-9, cases)


def check_kl_divergence(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    worst = 0.0
    cases = 100
    temperature = 0.6
    for _ in range(cases):
        p = rng.dirichlet(np.ones(8))
        q = rng.dirichlet(np.ones(8))
        worst = max(worst, -kl_penalty(p, q), abs(kl_penalty(p, p)))

        params = PolicyParams(rng.normal(0.0, 0.5, size=(5, 6)))
        reference = PolicyParams(rng.normal(0.0, 0.5, size=(5, 6)))
        state = rng.normal(0.0, 1.0, size=6)
        ref_p = core.token_distribution(reference, state, temperature)
        def kl_at(w: Any) -> float:
            return kl_penalty(core.token_distribution(PolicyParams(w), state, temperature), ref_p)

        numeric = _finite_difference(kl_at, params.weights)
        analytic = core.kl_gradient(params, state, temperature, reference)
        worst = max(worst, _relative_error(analytic, numeric))
    return OracleResult("kl_divergence", worst, 1e-6, cases)


def _enumerated_pass_at(n: int, c: int, k: int) -> float:
    outcomes = [True] * c + [False] * (n - c)
    subsets = list(itertools.combinations(range(n), k))
    return sum(1 for s in subsets if any(outcomes[i] for i in s)) / len(subsets)


def check_pass_at_k(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    worst = 0.0
    cases = 0
    for n in range(1, 9):
        for c in range(n + 1):
            values = [pass_at_k(n, c, k) for k in range(1, n + 1)]
            for k, value in enumerate(values, start=1):
                worst = max(worst, abs(value - _enumerated_pass_at(n, c, k)))
                cases += 1
            worst = max(worst, *(max(0.0, a - b) for a, b in zip(values, values[1:])), 0.0)
    return OracleResult("pass_at_k", worst, 1e-12, cases)


def _reachable_success(world: ToolWorld) -> bool:
    """Breadth-first search over distinct episode states for any reward-1 ending."""
    frontier = [world.reset()]
    seen = {frontier[0].signature()}
    while frontier:
        next_frontier = []
        for state in frontier:
            for token in range(world.vocab.size):
                child, event = world.step(state, token)
                if event is Event.TERMINAL and world.is_success(child):
                    return True
                if child.terminal or child.truncated:
                    continue
                signature = child.signature()
                if signature not in seen:
                    seen.add(signature)
                    next_frontier.append(child)
        frontier = next_frontier
    return False


def check_task_solvability(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    vocab = Vocabulary.build(16)
    failures = 0
    cases = 0
    for index in range(5):
        task = generate_task(vocab, 1, task_seed(11, index))
        failures += not _reachable_success(ToolWorld(task, vocab, max_len=12))
        cases += 1
    for depth in range(4):
        for index in range(10):
            task = generate_task(vocab, depth, task_seed(13, index))
            world = ToolWorld(task, vocab, max_len=64)
            failures += not world.is_success(world.replay(solve(task, vocab)))
            cases += 1
    return OracleResult("task_solvability", float(failures), 0.0, cases)


def _brute_trace(trajectory: Trajectory, vocab_size: int, window: int) -> list[float]:
    spans = trajectory.tool_spans
    limit = min(spans[0][0] if spans else len(trajectory.tokens), window)
    root = [trajectory.entropies[i] for i in range(limit) if trajectory.loss_mask[i]]
    h_root = sum(root) / len(root) if root else 0.0
    values = [h_root]
    for step, (_, start) in enumerate(spans):
        end = spans[step + 1][0] if step + 1 < len(spans) else len(trajectory.tokens)
        segment = [trajectory.entropies[i] for i in range(start, end) if trajectory.loss_mask[i]]
        h_t = sum(segment) / len(segment) if segment else 0.0
        values.append(h_t)
        values.append(max(-1.0, min(1.0, (h_t - h_root) / math.log(vocab_size))))
    return values


def check_entropy_recomputation(rng: Rng, factor_fn: FactorFn) -> OracleResult:
    vocab = Vocabulary.build(16)
    worst = 0.0
    cases = 0
    for index in range(40):
        task = generate_task(vocab, int(rng.integers(1, 4)), task_seed(17, index))
        schedule = rng.uniform(0.0, math.log(vocab.size), size=256)
        policy = ScriptedPolicy(task, vocab, entropy=lambda ep, s=schedule: s[len(ep.tokens)])
        pool = rollout(policy, ToolWorld(task, vocab), RolloutConfig(k=4), rng)
        for trajectory in pool.trajectories:
            window = int(rng.integers(1, 17))
            trace = build_trace(trajectory, vocab.size, window)
            ours = [trace.h_root]
            for h_t, d in zip(trace.h_tool, trace.delta_h):
                ours.extend([h_t, d])
            brute = _brute_trace(trajectory, vocab.size, window)
            worst = max(worst, float(np.max(np.abs(np.array(ours) - np.array(brute)))))
            if trace.h_tool:
                assert trace.h_tool_avg is not None
                worst = max(worst, abs(trace.h_tool_avg - float(np.mean(trace.h_tool))))
            cases += 1
    return OracleResult("entropy_recomputation", worst, 1e-12, cases)


Suite = Callable[[Rng, FactorFn], OracleResult]

SUITES: tuple[tuple[str, Suite], ...] = (
    ("softmax_normalization", check_softmax_normalization),
    ("sampler_frequencies", check_sampler_frequencies),
    ("log_prob_extended_precision", check_log_prob_precision),
    ("score_finite_difference", check_score_function),
    ("forward_invariance", check_forward_invariance),
    ("gradient_factor_tables", check_factor_tables),
    ("frozen_surrogate_gradient", check_frozen_gradient),
    ("stop_gradient_effect", check_stop_gradient_effect),
    ("aepo_grpo_continuity", check_aepo_grpo_continuity),
    ("budget_conservation", check_budget_conservation),
    ("premonitor_allocation", check_premonitor_allocation),
    ("branch_penalty_law", check_branch_penalty),
    ("advantage_normalization", check_advantage_normalization),
    ("kl_divergence", check_kl_divergence),
    ("pass_at_k", check_pass_at_k),
    ("task_solvability", check_task_solvability),
    ("entropy_recomputation", check_entropy_recomputation),
)


def suite_names() -> list[str]:
    return [name for name, _ in SUITES]


def run_suites(
    seed: int = 0,
    mutate: bool = False,
    only: Iterable[str] | None = None,
    on_result: Callable[[OracleResult], None] | None = None,
) -> VerifyReport:
    """Run the oracle suites, each with its own seeded generator.

    Args:
        seed: Base seed; suite ``i`` draws from ``SeedSequence([seed, i])``
        mutate: Use the corrupted AEPO gradient factor
        only: Restrict to these suite names
        on_result: Called after each suite finishes
    """
    selected = set(only) if only is not None else None
    if selected is not None:
        unknown = selected - set(suite_names())
        if unknown:
            raise UsageError(f"Unknown suite(s): {', '.join(sorted(unknown))}")
    factor_fn: FactorFn = mutated_factors if mutate else gradient_factors
    report = VerifyReport(mutated=mutate)
    for index, (name, suite) in enumerate(SUITES):
        if selected is not None and name not in selected:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        result = suite(rng, factor_fn)
        logger.info(
            f"{name}: error={result.error:.3e} tol={result.tolerance:.1e} "
            f"{'ok' if result.passed else 'FAILED'}"
        )
        report.results.append(result)
        if on_result is not None:
            on_result(result)
    return report


def verify(seed: int = 0, mutate: bool = False, only: Iterable[str] | None = None) -> VerifyReport:
    """Run the suites and raise :class:`OracleFailure` when any fails."""
    report = run_suites(seed, mutate, only)
    if report.failed:
        names = ", ".join(r.suite for r in report.failed)
        raise OracleFailure(f"{len(report.failed)} oracle suite(s) failed: {names}")
    return report
