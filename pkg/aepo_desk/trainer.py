"""Training loop, checkpoints, Pass@k evaluation and rule comparison.

Each step draws a query batch, runs one rollout per query with the current
policy, computes group advantages, applies the mini-batch update and appends
one metrics record. All randomness of step ``t`` derives from
``SeedSequence([seed, t])``, so a resumed run reproduces the records of an
uninterrupted one.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from aepo_desk.config import RunConfig, render_config, write_config_file
from aepo_desk.diagnostics import diagnose_pools
from aepo_desk.errors import UsageError
from aepo_desk.output import (
    MetricsWriter,
    RunPaths,
    dump_pools,
    read_json,
    read_jsonl,
    truncate_jsonl,
    write_csv,
    write_json,
)
from aepo_desk.policy import core
from aepo_desk.policy.advantages import GroupAdvantages, group_advantages
from aepo_desk.policy.core import PolicyParams, Vector
from aepo_desk.policy.update import (
    TokenBatch,
    UpdateRule,
    Variant,
    batch_gradient,
    batch_update,
    parse_variant,
)
from aepo_desk.rollout.engine import RolloutPool, rollout, sample_trajectory
from aepo_desk.rollout.policies import LinearPolicy
from aepo_desk.world.env import Task, ToolWorld, Trajectory
from aepo_desk.world.tasks import generate_tasks, load_tasks, solve
from aepo_desk.world.vocab import Vocabulary

logger = logging.getLogger(__name__)

INIT_STREAM = 0x1A2B
EVAL_STREAM = 0xE7A1
INIT_SCALE = 0.01
WARMSTART_TASKS = 16
COMPARE_TAIL = 10

POLICY_FILE = "policy.bin"
REFERENCE_FILE = "reference.bin"
STATE_FILE = "state.json"

StepCallback = Callable[[dict[str, Any]], None]


@dataclass
class TrainResult:
    params: PolicyParams
    reference: PolicyParams
    steps_done: int
    paths: RunPaths


def load_task_set(config: RunConfig, vocab: Vocabulary) -> list[Task]:
    """Tasks from ``task_file`` when set, otherwise generated from the seed."""
    if config.task_file:
        tasks = load_tasks(Path(config.task_file), vocab)
        if not tasks:
            raise UsageError(f"task file {config.task_file} is empty")
        return tasks
    return generate_tasks(config.seed, config.num_tasks, config.depths(), vocab)


def make_encoder(config: RunConfig, vocab: Vocabulary) -> Callable[[Sequence[int], int], Vector]:
    def encode(tokens: Sequence[int], query_len: int) -> Vector:
        return core.encode_state(vocab, tokens, query_len, config.max_len, config.feature_cap)

    return encode


def make_policy(params: PolicyParams, config: RunConfig, vocab: Vocabulary) -> LinearPolicy:
    return LinearPolicy(params, vocab, config.temperature, config.max_len, config.feature_cap)


def make_world(task: Task, config: RunConfig, vocab: Vocabulary) -> ToolWorld:
    return ToolWorld(task, vocab, config.max_len, config.tool_failure_rate)


def initial_params(config: RunConfig, vocab: Vocabulary) -> PolicyParams:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, INIT_STREAM]))
    return PolicyParams.random(vocab.size, core.feature_dim(vocab), rng, scale=INIT_SCALE)


def scripted_trajectory(world: ToolWorld, traj_id: int = 0) -> Trajectory:
    """The scripted solution of ``world.task`` as a trajectory with reward 1."""
    state = world.replay(solve(world.task, world.vocab))
    n = len(state.response)
    return Trajectory(
        traj_id=traj_id,
        prompt=tuple(state.tokens[: state.query_len]),
        tokens=state.response,
        old_log_probs=(0.0,) * n,
        entropies=(0.0,) * n,
        loss_mask=state.mask,
        tool_spans=state.spans,
        reward=1.0 if world.is_success(state) else 0.0,
    )


def _unit_advantages(trajectory: Trajectory) -> GroupAdvantages:
    ones = np.ones(len(trajectory.tokens))
    return GroupAdvantages(
        acc=(ones,), ent=(np.zeros_like(ones),), reshaped=(ones,), a_weight=0.0
    )


def warm_start(
    params: PolicyParams, tasks: Sequence[Task], config: RunConfig, vocab: Vocabulary
) -> PolicyParams:
    """Likelihood ascent on scripted solutions of the first few tasks.

    Stands in for a pretrained backbone: afterwards the policy knows the
    tool grammar well enough to reach a reward some of the time.
    """
    if config.warmstart_steps == 0 or not tasks:
        return params
    groups = [[scripted_trajectory(make_world(t, config, vocab))] for t in tasks[:WARMSTART_TASKS]]
    batch = TokenBatch.from_groups(
        groups,
        [_unit_advantages(g[0]) for g in groups],
        make_encoder(config, vocab),
        config.temperature,
    )
    # with old log-probs reset to the current ones every ratio is 1 and the
    # GRPO gradient at unit advantage is the mean log-likelihood gradient
    rule = UpdateRule(Variant.GRPO)
    for _ in range(config.warmstart_steps):
        current = _batch_log_probs(params, batch)
        grad = batch_gradient(params, replace(batch, old_log_probs=current), rule)
        params = PolicyParams(params.weights + config.warmstart_lr * grad)
    logger.info(
        f"Warm start: {config.warmstart_steps} steps on {len(groups)} scripted solutions, "
        f"mean log-prob {float(np.mean(_batch_log_probs(params, batch))):.4f}"
    )
    return params


def _batch_log_probs(params: PolicyParams, batch: TokenBatch) -> Any:
    return np.array(
        [
            core.log_prob(params, state, batch.temperature, int(token))
            for state, token in zip(batch.states, batch.tokens)
        ]
    )


def _save_state(
    paths: RunPaths, step: int, params: PolicyParams, reference: PolicyParams, rule: str
) -> Path:
    directory = paths.checkpoint(step)
    directory.mkdir(parents=True, exist_ok=True)
    core.save_checkpoint(params, directory / POLICY_FILE)
    core.save_checkpoint(reference, directory / REFERENCE_FILE)
    write_json(directory / STATE_FILE, {"step": step, "rule": rule})
    logger.info(f"Checkpoint at step {step}: {directory}")
    return directory


def load_state(directory: Path) -> tuple[PolicyParams, PolicyParams, int]:
    """Policy, reference and completed step count of one checkpoint directory."""
    params = core.load_checkpoint(directory / POLICY_FILE)
    reference = core.load_checkpoint(directory / REFERENCE_FILE)
    state = read_json(directory / STATE_FILE)
    return params, reference, int(state["step"])


def _query_plan(config: RunConfig, step: int, n_tasks: int) -> tuple[list[int], list[Any]]:
    children = np.random.SeedSequence([config.seed, step]).spawn(config.batch + 1)
    picker = np.random.default_rng(children[0])
    queries = picker.choice(n_tasks, size=config.batch, replace=n_tasks < config.batch)
    return [int(q) for q in queries], children[1:]


def collect_pools(
    params: PolicyParams,
    tasks: Sequence[Task],
    config: RunConfig,
    vocab: Vocabulary,
    step: int,
) -> tuple[list[int], list[RolloutPool]]:
    """Roll out every query of ``step``'s batch with the given policy."""
    queries, seeds = _query_plan(config, step, len(tasks))
    policy = make_policy(params, config, vocab)

    def run(index: int) -> RolloutPool:
        world = make_world(tasks[queries[index]], config, vocab)
        return rollout(policy, world, config.rollout, np.random.default_rng(seeds[index]))

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            pools = list(executor.map(run, range(len(queries))))
    else:
        pools = [run(i) for i in range(len(queries))]
    return queries, pools


def pool_pass_at(pools: Sequence[RolloutPool]) -> dict[str, float]:
    """Pass@1..k of one step's pools, each pool read as k samples of its query.

    Branched samples share prefixes; :func:`evaluate` gives the
    independent-sample estimate.
    """
    k = min(len(pool.trajectories) for pool in pools)
    counts = [sum(1 for t in pool.trajectories[:k] if t.reward > 0) for pool in pools]
    return {
        str(j): float(np.mean([pass_at_k(k, c, j) for c in counts])) for j in range(1, k + 1)
    }


def step_record(
    step: int,
    pools: Sequence[RolloutPool],
    advantages: Sequence[GroupAdvantages],
    report_record: dict[str, Any],
    config: RunConfig,
    vocab: Vocabulary,
) -> dict[str, Any]:
    rewards = [t.reward for pool in pools for t in pool.trajectories]
    solved = [any(t.reward > 0 for t in pool.trajectories) for pool in pools]
    diagnostics = diagnose_pools(pools, vocab.size, config.rollout.root_window).to_record()
    adv_flat = np.concatenate([a for g in advantages for a in g.reshaped])
    record = dict(report_record)
    record.update(
        {
            "step": step,
            "mean_reward": float(np.mean(rewards)),
            "pool_success_rate": float(np.mean(solved)),
            "pass_at": pool_pass_at(pools),
            "tool_calls_mean": diagnostics["mean_tool_calls"],
            "branch_histogram": diagnostics["branch_histogram"],
            "run_length_histogram": diagnostics["run_length_histogram"],
            "m": [pool.allocation.m for pool in pools],
            "top_ups": sum(pool.top_ups for pool in pools),
            "advantage": {
                "min": float(adv_flat.min()) if adv_flat.size else 0.0,
                "mean": float(adv_flat.mean()) if adv_flat.size else 0.0,
                "max": float(adv_flat.max()) if adv_flat.size else 0.0,
            },
        }
    )
    return record


def train(
    config: RunConfig, resume: bool = False, on_step: StepCallback | None = None
) -> TrainResult:
    """Run ``config.steps`` training steps into ``config.out_dir``.

    Args:
        config: Run configuration
        resume: Continue from the latest checkpoint of ``out_dir``
        on_step: Called with each metrics record after it is written

    Returns:
        Final parameters, the KL reference and the number of completed steps
    """
    paths = RunPaths(Path(config.out_dir)).create()
    vocab = config.vocab()
    tasks = load_task_set(config, vocab)

    if resume:
        latest = paths.latest_checkpoint()
        if latest is None:
            raise UsageError(f"No checkpoint to resume from in {paths.checkpoints}")
        if paths.config.exists() and paths.config.read_text() != render_config(config):
            logger.warning(f"Resuming {paths.root} with a config that differs from config.txt")
        params, reference, start = load_state(latest)
        truncate_jsonl(paths.metrics, start)
        logger.info(f"Resuming from {latest} (step {start})")
    else:
        write_config_file(config, paths.config)
        params = warm_start(initial_params(config, vocab), tasks, config, vocab)
        reference = params.copy()
        start = 0
        truncate_jsonl(paths.metrics, 0)

    last_saved = start if resume else -1
    encode = make_encoder(config, vocab)

    with MetricsWriter(paths.metrics) as writer:
        for step in range(start, config.steps):
            queries, pools = collect_pools(params, tasks, config, vocab, step)
            advantages = [
                group_advantages(pool.trajectories, config.a_weight, config.entropy_adv_scope)
                for pool in pools
            ]
            batch = TokenBatch.from_groups(
                [pool.trajectories for pool in pools], advantages, encode, config.temperature
            )
            params, report = batch_update(
                params,
                batch,
                config.rule,
                config.lr,
                config.minibatches,
                config.update_epochs,
                reference=reference,
            )
            report.step = step
            record = step_record(step, pools, advantages, report.to_record(), config, vocab)
            writer.write(record)
            logger.debug(
                f"step {step}: reward={record['mean_reward']:.3f} "
                f"zeroed={report.zeroed_frac:.3f} tokens={report.n_tokens}"
            )

            if config.dump_pools:
                dump_pools(
                    paths.pool_dump(step), pools, step, vocab.size, config.rollout.root_window
                )
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                _save_state(paths, step + 1, params, reference, config.rule.name)
                last_saved = step + 1
            if on_step is not None:
                on_step(record)

    done = max(start, config.steps)
    if last_saved != done:
        _save_state(paths, done, params, reference, config.rule.name)
    return TrainResult(params=params, reference=reference, steps_done=done, paths=paths)


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased Pass@k from ``c`` successes among ``n`` samples."""
    if not 1 <= k <= n:
        raise UsageError(f"Pass@k needs 1 <= k <= n, got k={k} n={n}")
    if not 0 <= c <= n:
        raise UsageError(f"success count {c} outside [0, {n}]")
    if n - c < k:
        return 1.0
    return 1.0 - math.comb(n - c, k) / math.comb(n, k)


def evaluate(
    params: PolicyParams, tasks: Sequence[Task], config: RunConfig, n: int | None = None
) -> dict[str, Any]:
    """Pass@1..n over ``tasks`` from ``n`` independent samples per task."""
    n = config.eval_samples if n is None else n
    if n < 1:
        raise UsageError(f"eval needs at least one sample per task, got {n}")
    if not tasks:
        raise UsageError("no tasks to evaluate")
    vocab = config.vocab()
    policy = make_policy(params, config, vocab)

    successes: list[int] = []
    rewards: list[float] = []
    tool_calls: list[int] = []
    for index, task in enumerate(tasks):
        world = make_world(task, config, vocab)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, EVAL_STREAM, index]))
        samples = [sample_trajectory(policy, world, rng, i) for i in range(n)]
        successes.append(sum(1 for s in samples if s.reward > 0))
        rewards.extend(s.reward for s in samples)
        tool_calls.extend(s.tool_calls for s in samples)

    pass_at = {
        str(k): float(np.mean([pass_at_k(n, c, k) for c in successes])) for k in range(1, n + 1)
    }
    return {
        "tasks": len(tasks),
        "samples": n,
        "mean_reward": float(np.mean(rewards)),
        "mean_tool_calls": float(np.mean(tool_calls)),
        "pass_at": pass_at,
    }


def evaluate_run(config: RunConfig, checkpoint: Path | None = None) -> dict[str, Any]:
    """Evaluate a run directory's latest (or the given) checkpoint and write eval.json."""
    paths = RunPaths(Path(config.out_dir))
    directory = checkpoint if checkpoint is not None else paths.latest_checkpoint()
    if directory is None:
        raise UsageError(f"No checkpoint found in {paths.checkpoints}")
    params, _, step = load_state(Path(directory))
    result = evaluate(params, load_task_set(config, config.vocab()), config)
    result["checkpoint_step"] = step
    if paths.root.is_dir():
        write_json(paths.eval, result)
    return result


def _labels(rules: Sequence[str]) -> list[str]:
    labels: list[str] = []
    for rule in rules:
        base = parse_variant(rule).value
        label = base
        suffix = 2
        while label in labels:
            label = f"{base}-{suffix}"
            suffix += 1
        labels.append(label)
    return labels


COMPARE_COLUMNS = (
    "mean_reward",
    "zeroed_frac",
    "nonzero_grad_tokens",
    "mean_entropy",
    "entropy_drop",
)


def entropy_drops(records: Sequence[dict[str, Any]]) -> list[float]:
    """Step-to-step decrease of the mean rollout entropy; 0 for the first step."""
    entropies = [r["mean_entropy"] for r in records]
    return [0.0] + [float(a - b) for a, b in zip(entropies, entropies[1:])]


def _compare_seed(
    config: RunConfig,
    rules: Sequence[str],
    labels: Sequence[str],
    root: RunPaths,
    on_step: StepCallback | None,
) -> list[dict[str, Any]]:
    per_rule: list[list[dict[str, Any]]] = []
    summaries: list[dict[str, Any]] = []

    for label, rule in zip(labels, rules):
        sub = config.with_overrides(rule=rule, out_dir=str(root.root / label))
        logger.info(f"Comparing rule {sub.rule.name} (seed {sub.seed}) in {sub.out_dir}")
        result = train(sub, on_step=on_step)
        records = read_jsonl(result.paths.metrics)
        for record, drop in zip(records, entropy_drops(records)):
            record["entropy_drop"] = drop
        per_rule.append(records)
        evaluation = evaluate(result.params, load_task_set(sub, sub.vocab()), sub)
        write_json(result.paths.eval, evaluation)

        tail = records[-COMPARE_TAIL:]
        summaries.append(
            {
                "label": label,
                "rule": sub.rule.name,
                "seed": sub.seed,
                "steps": result.steps_done,
                "final_mean_reward": (
                    float(np.mean([r["mean_reward"] for r in tail])) if tail else 0.0
                ),
                "mean_zeroed_frac": (
                    float(np.mean([r["zeroed_frac"] for r in records])) if records else 0.0
                ),
                "max_entropy_drop": max((r["entropy_drop"] for r in records), default=0.0),
                "pass_at_1": evaluation["pass_at"]["1"],
                "pass_at_n": evaluation["pass_at"][str(evaluation["samples"])],
            }
        )

    header = ["step"] + [f"{label}_{column}" for label in labels for column in COMPARE_COLUMNS]
    rows = []
    for index in range(min(len(records) for records in per_rule)):
        row: list[Any] = [per_rule[0][index]["step"]]
        for records in per_rule:
            row.extend(records[index][column] for column in COMPARE_COLUMNS)
        rows.append(row)
    write_csv(root.compare, header, rows)
    return summaries


def head_to_head(summaries: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """Seed-by-seed tally of the first rule label against every other label.

    ``reward_wins`` counts seeds where the first label's final reward is at
    least the other's; ``smaller_drop`` counts seeds where its largest
    entropy drop is strictly smaller.
    """
    labels = list(dict.fromkeys(s["label"] for s in summaries))
    if len(labels) < 2:
        return []
    by_seed: dict[int, dict[str, dict[str, Any]]] = {}
    for summary in summaries:
        by_seed.setdefault(summary["seed"], {})[summary["label"]] = summary

    lead = labels[0]
    tallies = []
    for other in labels[1:]:
        pairs = [(s[lead], s[other]) for s in by_seed.values() if lead in s and other in s]
        tallies.append(
            {
                "label": lead,
                "against": other,
                "seeds": len(pairs),
                "reward_wins": sum(
                    1 for a, b in pairs if a["final_mean_reward"] >= b["final_mean_reward"]
                ),
                "smaller_drop": sum(
                    1 for a, b in pairs if a["max_entropy_drop"] < b["max_entropy_drop"]
                ),
            }
        )
    return tallies


def compare(
    config: RunConfig,
    rules: Sequence[str],
    on_step: StepCallback | None = None,
    seeds: Sequence[int] | None = None,
) -> list[dict[str, Any]]:
    """Train and evaluate once per rule under identical seeds and tasks.

    Writes ``compare.csv`` with one row per step and, for every rule label,
    the columns of :data:`COMPARE_COLUMNS`. With several ``seeds`` each seed
    gets its own ``seed-N`` sub-directory and table, and ``head_to_head.json``
    at the top holds the :func:`head_to_head` tally. Returns one summary per
    rule and seed.
    """
    if len(rules) < 2:
        raise UsageError(f"compare needs at least two rules, got {len(rules)}")
    seeds = list(seeds) if seeds else [config.seed]
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"compare seeds must be distinct, got {seeds}")
    root = RunPaths(Path(config.out_dir)).create()
    labels = _labels(rules)

    if len(seeds) == 1:
        return _compare_seed(config.with_overrides(seed=seeds[0]), rules, labels, root, on_step)

    summaries: list[dict[str, Any]] = []
    for seed in seeds:
        seed_root = RunPaths(root.root / f"seed-{seed}").create()
        summaries.extend(
            _compare_seed(config.with_overrides(seed=seed), rules, labels, seed_root, on_step)
        )
    write_json(root.head_to_head, head_to_head(summaries))
    return summaries
