"""Seeded task generator, scripted optimal player and task JSONL files."""

import json
import logging
from pathlib import Path
from typing import Generator, Iterable, Sequence

import numpy as np

from aepo_desk.errors import AepoError, ConfigError, DumpParseError, StorageError
from aepo_desk.world.env import Task
from aepo_desk.world.tools import ToolRegistry, encode_number
from aepo_desk.world.vocab import Vocabulary

logger = logging.getLogger(__name__)

MAX_DEPTH = 3


def task_seed(seed: int, index: int) -> int:
    """Per-task seed; also seeds the task's LOOKUP table."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_task(vocab: Vocabulary, depth: int, seed: int) -> Task:
    """Build one task of the given depth.

    Depth 0 asks to repeat a digit, depth 1 adds two digits, depth 2 adds a
    looked-up value to a digit, depth 3 adds two looked-up values.
    """
    if not 0 <= depth <= MAX_DEPTH:
        raise ConfigError(f"task depth must be in [0, {MAX_DEPTH}], got {depth}")

    n = vocab.n_digits
    rng = np.random.default_rng([seed, depth])
    table = ToolRegistry.for_seed(vocab, seed).table
    sep = vocab.id("SEP")
    x, y = (int(v) for v in rng.integers(0, n, size=2))

    if depth == 0:
        query = (x, sep)
        value = x
    elif depth == 1:
        query = (vocab.id("CALL_CALC"), x, y, sep)
        value = x + y
    elif depth == 2:
        query = (vocab.id("CALL_LOOKUP"), x, vocab.id("CALL_CALC"), y, sep)
        value = table[x] + y
    else:
        lookup = vocab.id("CALL_LOOKUP")
        query = (lookup, x, lookup, y, sep)
        value = table[x] + table[y]

    return Task(query=query, answer=tuple(encode_number(value, vocab)), depth=depth, seed=seed)


def iter_tasks(
    seed: int, count: int, depths: Sequence[int], vocab: Vocabulary
) -> Generator[Task, None, None]:
    """Yield ``count`` tasks, cycling through ``depths``."""
    if not depths:
        raise ConfigError("task_depths is empty")
    for index in range(count):
        yield generate_task(vocab, depths[index % len(depths)], task_seed(seed, index))


def generate_tasks(seed: int, count: int, depths: Sequence[int], vocab: Vocabulary) -> list[Task]:
    tasks = list(iter_tasks(seed, count, depths, vocab))
    logger.debug(f"Generated {len(tasks)} tasks (seed={seed}, depths={list(depths)})")
    return tasks


QUERY_SHAPES: dict[int, tuple[str, ...]] = {
    0: ("digit", "SEP"),
    1: ("CALL_CALC", "digit", "digit", "SEP"),
    2: ("CALL_LOOKUP", "digit", "CALL_CALC", "digit", "SEP"),
    3: ("CALL_LOOKUP", "digit", "CALL_LOOKUP", "digit", "SEP"),
}


def check_task(task: Task, vocab: Vocabulary) -> None:
    """Raise ValueError unless the query fits the depth and the answer solves it."""
    shape = QUERY_SHAPES.get(task.depth)
    if shape is None:
        raise ValueError(f"depth {task.depth} outside [0, {MAX_DEPTH}]")
    fits = len(task.query) == len(shape) and all(
        vocab.is_digit(token) if name == "digit" else token == vocab.id(name)
        for token, name in zip(task.query, shape)
    )
    if not fits:
        raise ValueError(f"query '{vocab.render(task.query)}' does not fit depth {task.depth}")

    table = ToolRegistry.for_seed(vocab, task.seed).table
    x, y = ([t for t in task.query if vocab.is_digit(t)] + [0])[:2]
    value = (x, x + y, table[x] + y, table[x] + table[y])[task.depth]
    expected = tuple(encode_number(value, vocab))
    if task.answer != expected:
        raise ValueError(
            f"answer '{vocab.render(task.answer)}' should be '{vocab.render(expected)}'"
        )


def solve(task: Task, vocab: Vocabulary) -> list[int]:
    """Model-generated tokens of a reward-1 episode for ``task``.

    Tool results are spliced in by the environment, so they are not part of
    the returned list.
    """
    table = ToolRegistry.for_seed(vocab, task.seed).table
    calc = vocab.id("CALL_CALC")
    lookup = vocab.id("CALL_LOOKUP")
    close = vocab.id("END_CALL")
    tail = [vocab.id("ANSWER"), *task.answer, vocab.end]

    if task.depth == 0:
        return tail

    if task.depth == 1:
        _, x, y, _ = task.query
        return [calc, x, y, close, *tail]

    if task.depth == 2:
        _, key, _, y, _ = task.query
        return [lookup, key, close, calc, table[key], y, close, *tail]

    _, k1, _, k2, _ = task.query
    return [
        lookup, k1, close,
        lookup, k2, close,
        calc, table[k1], table[k2], close,
        *tail,
    ]


def parse_depths(text: str) -> list[int]:
    """Parse a comma-separated depth list such as ``"1,2"``."""
    try:
        depths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"task_depths must be comma-separated integers, got {text!r}") from None
    if not depths:
        raise ConfigError("task_depths is empty")
    for depth in depths:
        if not 0 <= depth <= MAX_DEPTH:
            raise ConfigError(f"task depth must be in [0, {MAX_DEPTH}], got {depth}")
    return depths


def dump_tasks(tasks: Iterable[Task], path: Path) -> int:
    """Write tasks as JSON lines. Returns the number written."""
    count = 0
    try:
        with open(path, "w") as f:
            for task in tasks:
                record = {
                    "query": list(task.query),
                    "answer": list(task.answer),
                    "depth": task.depth,
                    "seed": task.seed,
                }
                f.write(json.dumps(record) + "\n")
                count += 1
    except PermissionError:
        raise StorageError(f"Cannot write to {path}: Permission denied.") from None
    except OSError as e:
        raise StorageError(f"Failed to write task file {path}: {e}") from e
    return count


def load_tasks(path: Path, vocab: Vocabulary) -> list[Task]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise StorageError(f"Failed to read task file {path}: {e}") from e

    tasks: list[Task] = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            task = Task(
                query=tuple(int(t) for t in record["query"]),
                answer=tuple(int(t) for t in record["answer"]),
                depth=int(record["depth"]),
                seed=int(record["seed"]),
            )
        except (ValueError, KeyError, TypeError) as e:
            raise DumpParseError(path, line_number, f"bad task record: {e}") from e
        except AepoError as e:
            raise DumpParseError(path, line_number, e.message) from e
        for token in (*task.query, *task.answer):
            if not 0 <= token < vocab.size:
                raise DumpParseError(path, line_number, f"token {token} outside vocabulary")
        try:
            check_task(task, vocab)
        except ValueError as e:
            raise DumpParseError(path, line_number, str(e)) from e
        tasks.append(task)
    return tasks
