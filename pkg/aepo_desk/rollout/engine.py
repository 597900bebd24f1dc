"""Dynamic entropy-balanced rollout.

A probe trajectory decides how the budget ``k`` splits into ``m`` global
samples and ``b = k - m`` branch samples. Chains then advance one segment at a
time in chain-id order; after the segment that follows tool result ``i`` a
chain compares that segment's entropy with its root entropy and may fork
``Z`` children that restart from the end of tool result ``i``. Once the
branch budget is spent chains simply run to completion; any budget left when
every chain has finished is filled with extra global samples.
"""

import logging
import math
import threading
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from aepo_desk.errors import ConfigError, UsageError
from aepo_desk.rollout.entropy import (
    DEFAULT_ROOT_WINDOW,
    EntropyTrace,
    build_trace,
    delta_entropy,
    high_entropy_runs,
    root_entropy,
    tool_avg_entropy,
    tool_step_entropy,
)
from aepo_desk.rollout.policies import Policy
from aepo_desk.world.env import Event, EpisodeState, Lineage, ToolWorld, Trajectory

logger = logging.getLogger(__name__)


class RolloutMode(str, Enum):
    AEPO = "aepo"
    TREE = "tree"
    FLAT = "flat"


class DecideMode(str, Enum):
    THRESHOLD = "threshold"
    BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class RolloutConfig:
    """Budget and branching knobs.

    ``alpha_base`` and ``gamma_ent`` set the base branch probability and its
    entropy slope, ``lambda_pen`` the consecutive-branch penalty slope,
    ``beta_sens`` the sigmoid sensitivity of the global/branch split.
    """

    k: int = 8
    beta_sens: float = 0.2
    alpha_base: float = 0.2
    gamma_ent: float = 0.2
    lambda_pen: float = 0.2
    tau_branch: float = 0.15
    branch_width: int = 2
    root_window: int = DEFAULT_ROOT_WINDOW
    decide_mode: DecideMode = DecideMode.THRESHOLD
    mode: RolloutMode = RolloutMode.AEPO

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if not self.beta_sens > 0:
            raise ConfigError(f"beta_sens must be > 0, got {self.beta_sens}")
        for name in ("alpha_base", "gamma_ent", "lambda_pen", "tau_branch"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.branch_width < 1:
            raise ConfigError(f"Z must be >= 1, got {self.branch_width}")
        if self.root_window < 1:
            raise ConfigError(f"root_window must be >= 1, got {self.root_window}")
        object.__setattr__(self, "decide_mode", DecideMode(self.decide_mode))
        object.__setattr__(self, "mode", RolloutMode(self.mode))


@dataclass(frozen=True)
class BudgetAllocation:
    k: int
    m: int

    def __post_init__(self) -> None:
        if not 0 <= self.m <= self.k:
            raise UsageError(f"global count m={self.m} outside [0, {self.k}]")

    @property
    def b(self) -> int:
        return self.k - self.m


@dataclass(frozen=True)
class BranchEvent:
    chain_id: int
    step: int
    width: int
    p_t: float


@dataclass(frozen=True)
class Branch:
    width: int


@dataclass(frozen=True)
class Continue:
    pass


CONTINUE = Continue()
Action = Branch | Continue


@dataclass(frozen=True)
class RolloutPool:
    trajectories: tuple[Trajectory, ...]
    allocation: BudgetAllocation
    events: tuple[BranchEvent, ...]
    top_ups: int = 0

    def traces(self, vocab_size: int, window: int = DEFAULT_ROOT_WINDOW) -> list[EntropyTrace]:
        return [build_trace(t, vocab_size, window) for t in self.trajectories]


class BranchBudget:
    """Branch budget ``b`` with compare-and-decrement semantics."""

    def __init__(self, remaining: int):
        if remaining < 0:
            raise UsageError(f"branch budget must be >= 0, got {remaining}")
        self._remaining = remaining
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        with self._lock:
            return self._remaining

    def take(self, requested: int) -> int:
        """Take up to ``requested`` units and return how many were granted."""
        with self._lock:
            granted = max(0, min(requested, self._remaining))
            self._remaining -= granted
            return granted

    def drain(self) -> int:
        with self._lock:
            granted, self._remaining = self._remaining, 0
            return granted


@dataclass
class BranchState:
    """One chain under construction.

    Lists are aligned with the response tokens. ``ready`` counts segments
    already generated; ``revealed`` counts segments the scheduler has
    processed, so a fully generated probe can be stepped through in lockstep.
    """

    chain_id: int
    state: EpisodeState
    lineage: Lineage | None = None
    run_length: int = 0
    next_decision: int = 0
    depth: int = 0
    tokens: list[int] = field(default_factory=list)
    old_log_probs: list[float] = field(default_factory=list)
    entropies: list[float] = field(default_factory=list)
    loss_mask: list[bool] = field(default_factory=list)
    ready: int = 0
    revealed: int = 0

    @property
    def tool_spans(self) -> tuple[tuple[int, int], ...]:
        return self.state.spans

    @property
    def finished(self) -> bool:
        return self.state.terminal and self.revealed >= self.ready

    def to_trajectory(self, world: ToolWorld) -> Trajectory:
        trajectory = Trajectory(
            traj_id=self.chain_id,
            prompt=tuple(world.task.query),
            tokens=tuple(self.tokens),
            old_log_probs=tuple(self.old_log_probs),
            entropies=tuple(self.entropies),
            loss_mask=tuple(self.loss_mask),
            tool_spans=tuple(self.state.spans),
            reward=1.0 if world.is_success(self.state) else 0.0,
            lineage=self.lineage,
            truncated=self.state.truncated,
        )
        return trajectory


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def allocate_budget(
    k: int, h_root: float, h_tool_avg: float | None, beta_sens: float
) -> BudgetAllocation:
    """Global count ``m = round(k * sigmoid(beta * (h_root - h_tool_avg)))``.

    Clamped to [1, k - 1] so both phases run; ``m = k`` when the probe made
    no tool call.
    """
    if h_tool_avg is None:
        return BudgetAllocation(k, k)
    raw = k * _sigmoid(beta_sens * (h_root - h_tool_avg))
    m = int(math.floor(raw + 0.5))
    return BudgetAllocation(k, min(max(m, 1), k - 1))


def branch_probability(delta_h: float, run_length: int, config: RolloutConfig) -> float:
    """``clamp(alpha + gamma * dH, 0, 1) * (1 - min(1, lambda * l))``."""
    if run_length < 0:
        raise UsageError(f"consecutive counter must be >= 0, got {run_length}")
    base = min(1.0, max(0.0, config.alpha_base + config.gamma_ent * delta_h))
    penalty = min(1.0, config.lambda_pen * run_length)
    return base * (1.0 - penalty)


def decide_action(
    p_t: float,
    config: RolloutConfig,
    rng: np.random.Generator | None = None,
) -> Action:
    """Branch iff ``p_t > tau_branch``; in bernoulli mode, iff a uniform draw < ``p_t``."""
    if config.decide_mode is DecideMode.BERNOULLI:
        if rng is None:
            raise UsageError("bernoulli decide mode needs an rng")
        return Branch(config.branch_width) if rng.random() < p_t else CONTINUE
    return Branch(config.branch_width) if p_t > config.tau_branch else CONTINUE


def _advance(
    chain: BranchState, policy: Policy, world: ToolWorld, rng: np.random.Generator
) -> None:
    """Generate (or reveal) the chain's next segment."""
    if chain.revealed < chain.ready:
        chain.revealed += 1
        return

    state = chain.state
    while True:
        p = policy.token_distribution(state)
        h = policy.token_entropy(state, p)
        token = policy.sample(state, p, rng)
        before = len(state.response)
        state, event = world.step(state, token)

        chain.tokens.append(token)
        chain.old_log_probs.append(float(np.log(p[token])))
        chain.entropies.append(h)
        chain.loss_mask.append(True)
        for spliced in state.response[before + 1:]:
            chain.tokens.append(spliced)
            chain.old_log_probs.append(0.0)
            chain.entropies.append(0.0)
            chain.loss_mask.append(False)

        if event is not Event.NONE:
            break

    chain.state = state
    chain.ready += 1
    chain.revealed += 1


def _run_to_end(
    chain: BranchState, policy: Policy, world: ToolWorld, rng: np.random.Generator
) -> BranchState:
    while not chain.finished:
        _advance(chain, policy, world, rng)
    return chain


def _new_chain(chain_id: int, world: ToolWorld) -> BranchState:
    return BranchState(chain_id=chain_id, state=world.reset())


def sample_trajectory(
    policy: Policy, world: ToolWorld, rng: np.random.Generator, traj_id: int = 0
) -> Trajectory:
    """One independent episode from the initial state, no branching."""
    return _run_to_end(_new_chain(traj_id, world), policy, world, rng).to_trajectory(world)


def premonitor(
    policy: Policy,
    world: ToolWorld,
    config: RolloutConfig,
    rng: np.random.Generator,
) -> tuple[BudgetAllocation, Trajectory]:
    """Generate one probe trajectory and split the budget from its entropies."""
    probe = sample_trajectory(policy, world, rng)

    if config.mode is RolloutMode.FLAT:
        return BudgetAllocation(config.k, config.k), probe

    h_root = root_entropy(probe, config.root_window)
    steps = [tool_step_entropy(probe, i) for i in range(probe.tool_calls)]
    if config.mode is RolloutMode.TREE:
        m = min(max(config.k // 2, 1), config.k - 1)
        allocation = BudgetAllocation(config.k, m)
    else:
        allocation = allocate_budget(config.k, h_root, tool_avg_entropy(steps), config.beta_sens)

    logger.debug(
        f"probe: tools={probe.tool_calls} h_root={h_root:.4f} "
        f"steps={[round(h, 4) for h in steps]} -> m={allocation.m} b={allocation.b}"
    )
    return allocation, probe


def _chain_from_trajectory(trajectory: Trajectory, world: ToolWorld) -> BranchState:
    """Rebuild a finished chain whose segments are all still unrevealed."""
    state = world.replay(trajectory.generated_tokens)
    segments = trajectory.tool_calls + 1
    if trajectory.tool_spans and trajectory.tool_spans[-1][1] == len(trajectory.tokens):
        # truncated right after a splice: the last segment ends at that result
        segments -= 1
    return BranchState(
        chain_id=trajectory.traj_id,
        state=state,
        tokens=list(trajectory.tokens),
        old_log_probs=list(trajectory.old_log_probs),
        entropies=list(trajectory.entropies),
        loss_mask=list(trajectory.loss_mask),
        ready=segments,
        revealed=0,
    )


def branch(
    parent: BranchState,
    step: int,
    width: int,
    budget: BranchBudget,
    first_id: int,
    world: ToolWorld,
) -> list[BranchState]:
    """Fork up to ``width`` children from the end of tool result ``step``.

    Each child copies the parent's tokens, log-probs, entropies and masks
    through the spliced result, inherits the parent's consecutive counter and
    makes its first decision at ``step + 1``. Returns an empty list once the
    budget is exhausted.
    """
    if not 0 <= step < len(parent.tool_spans):
        raise UsageError(f"chain {parent.chain_id} has no tool step {step}")

    granted = budget.take(width)
    cut = parent.tool_spans[step][1]
    generated = [t for t, keep in zip(parent.tokens[:cut], parent.loss_mask[:cut]) if keep]
    state = world.replay(generated)

    children = []
    for index in range(granted):
        children.append(
            BranchState(
                chain_id=first_id + index,
                state=state,
                lineage=Lineage(parent.chain_id, step, index),
                run_length=parent.run_length,
                next_decision=step + 1,
                depth=parent.depth + 1,
                tokens=parent.tokens[:cut],
                old_log_probs=parent.old_log_probs[:cut],
                entropies=parent.entropies[:cut],
                loss_mask=parent.loss_mask[:cut],
                ready=step + 1,
                revealed=step + 1,
            )
        )
    return children


def _completed_step(chain: BranchState) -> int:
    """Tool step whose following segment was just revealed, or -1."""
    return chain.revealed - 2


def rollout(
    policy: Policy,
    world: ToolWorld,
    config: RolloutConfig,
    rng: np.random.Generator,
) -> RolloutPool:
    """Produce exactly ``config.k`` trajectories for one task."""
    allocation, probe = premonitor(policy, world, config, rng)
    chains: list[BranchState] = [_chain_from_trajectory(probe, world)]
    chains += [_new_chain(i, world) for i in range(1, allocation.m)]
    budget = BranchBudget(allocation.b)
    events: list[BranchEvent] = []
    branching = config.mode is not RolloutMode.FLAT
    vocab_size = world.vocab.size

    while True:
        progressed = False
        for chain in list(chains):
            if chain.finished:
                continue
            _advance(chain, policy, world, rng)
            progressed = True

            step = _completed_step(chain)
            if not branching or budget.remaining == 0 or step < chain.next_decision:
                continue

            h_root = root_entropy(chain, config.root_window)
            delta_h = delta_entropy(tool_step_entropy(chain, step), h_root, vocab_size)
            penalty_run = chain.run_length if config.mode is RolloutMode.AEPO else 0
            p_t = branch_probability(delta_h, penalty_run, config)
            chain.run_length = chain.run_length + 1 if delta_h > 0 else 0
            chain.next_decision = step + 1

            action = decide_action(p_t, config, rng)
            if isinstance(action, Branch):
                children = branch(chain, step, action.width, budget, len(chains), world)
                if children:
                    chains.extend(children)
                    events.append(BranchEvent(chain.chain_id, step, len(children), p_t))
                    logger.debug(
                        f"chain {chain.chain_id} step {step}: p_t={p_t:.4f} "
                        f"-> {len(children)} children, b={budget.remaining}"
                    )
        if not progressed:
            break

    top_ups = budget.drain()
    for _ in range(top_ups):
        chains.append(_run_to_end(_new_chain(len(chains), world), policy, world, rng))

    trajectories = []
    for chain in sorted(chains, key=lambda c: c.chain_id):
        trajectory = chain.to_trajectory(world)
        trace = build_trace(trajectory, vocab_size, config.root_window)
        trajectories.append(
            _with_runs(trajectory, tuple(high_entropy_runs(trace.delta_h)))
        )

    if len(trajectories) != config.k:
        raise UsageError(f"rollout produced {len(trajectories)} trajectories, expected {config.k}")

    return RolloutPool(tuple(trajectories), allocation, tuple(events), top_ups)


def _with_runs(trajectory: Trajectory, runs: tuple[int, ...]) -> Trajectory:
    return replace(trajectory, high_entropy_run=runs)
