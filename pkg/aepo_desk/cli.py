"""Command-line interface for aepo-desk."""

import functools
import json
from pathlib import Path
from typing import Any, Callable, TypeVar

import click
from rich.console import Console
from rich.panel import Panel
from rich.progress import (
    BarColumn,
    Progress,
    SpinnerColumn,
    TaskProgressColumn,
    TextColumn,
    TimeRemainingColumn,
)
from rich.table import Table

from aepo_desk import __version__
from aepo_desk.config import CONFIG_KEYS, RunConfig, load_config_file
from aepo_desk.errors import AepoError, OracleFailure, UsageError
from aepo_desk.output import RunPaths, setup_logging, write_json

console = Console()

F = TypeVar("F", bound=Callable[..., Any])


def _param_name(key_name: str) -> str:
    return "opt_" + key_name.lower()


PARAM_TO_KEY = {_param_name(key.name): key.name for key in CONFIG_KEYS}


def config_options(command: F) -> F:
    """Add ``--config`` and one option per config key.

    Options default to None so that only flags given on the command line
    override values loaded from ``--config``.
    """
    for key in reversed(CONFIG_KEYS):
        default = "" if key.default is None else key.default
        command = click.option(
            key.flag,
            _param_name(key.name),
            type=str,
            default=None,
            help=f"{key.help} [default: {default}]",
        )(command)
    return click.option(
        "--config",
        "config_file",
        type=click.Path(dir_okay=False, path_type=Path),
        default=None,
        help="key = value config file; explicit flags override it",
    )(command)


def resolve_config(
    config_file: Path | None, options: dict[str, Any], base: dict[str, str] | None = None
) -> RunConfig:
    """Merge ``base``, then the config file, then explicit flags."""
    mapping: dict[str, Any] = dict(base or {})
    if config_file is not None:
        mapping.update(load_config_file(config_file))
    for param, value in options.items():
        if param in PARAM_TO_KEY and value is not None:
            mapping[PARAM_TO_KEY[param]] = value
    return RunConfig.from_mapping(mapping)


def handle_errors(command: F) -> F:
    """Turn library errors into a red message and the matching exit status."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except AepoError as e:
            console.print(f"[red]Error:[/red] {e.message}")
            raise SystemExit(e.exit_code)
        except KeyboardInterrupt:
            console.print("\n\n[yellow]Interrupted by user.[/yellow]")
            raise SystemExit(1)

    return wrapper  # type: ignore[return-value]


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TaskProgressColumn(),
        TimeRemainingColumn(),
        console=console,
    )


def show_config_summary(config: RunConfig) -> None:
    summary = (
        f"  Rule:        [cyan]{config.rule.name}[/cyan]"
        f" (eps {config.rule.clip.eps_low}/{config.rule.clip.eps_high})\n"
        f"  Rollout:     [cyan]{config.rollout.mode.value}[/cyan]"
        f" k={config.rollout.k} Z={config.rollout.branch_width}\n"
        f"  Steps:       [cyan]{config.steps}[/cyan] x {config.batch} queries\n"
        f"  Tasks:       [cyan]{config.task_file or config.num_tasks}[/cyan]"
        f" depths {config.task_depths}\n"
        f"  Run dir:     [cyan]{config.out_dir}[/cyan]"
    )
    console.print(Panel(summary, title="aepo-desk", border_style="blue"))


def show_pass_at(result: dict[str, Any], title: str = "Pass@k") -> None:
    table = Table(title=title)
    table.add_column("k", justify="right")
    table.add_column("Pass@k", justify="right")
    for k, value in result["pass_at"].items():
        table.add_row(k, f"{value:.4f}")
    console.print(table)
    console.print(
        f"[dim]{result['tasks']} tasks x {result['samples']} samples, "
        f"mean reward {result['mean_reward']:.4f}[/dim]"
    )


@click.group()
@click.version_option(__version__, prog_name="aepo-desk")
@click.option("--debug", is_flag=True, help="Write a debug log under the run directory's logs/")
@click.pass_context
def cli(ctx: click.Context, debug: bool) -> None:
    """Desk-scale entropy-balanced agentic policy optimization."""
    ctx.ensure_object(dict)
    ctx.obj["debug"] = debug


def start_debug_log(run_dir: Path | None = None) -> None:
    """Open the command's debug log when ``--debug`` was given."""
    ctx = click.get_current_context()
    if not (ctx.find_root().obj or {}).get("debug"):
        return
    debug_log = setup_logging(ctx.info_name or "aepo-desk", run_dir)
    console.print(f"[dim]Debug log: {debug_log}[/dim]")


@cli.command()
@config_options
@click.option(
    "--resume",
    "resume_dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Continue the run in this directory from its latest checkpoint",
)
@handle_errors
def train(config_file: Path | None, resume_dir: Path | None, **options: Any) -> None:
    """Train a policy and write metrics and checkpoints to the run directory."""
    from aepo_desk.trainer import train as run_training

    base: dict[str, str] = {}
    if resume_dir is not None:
        paths = RunPaths(resume_dir)
        if paths.config.exists() and config_file is None:
            base = load_config_file(paths.config)
        base["out_dir"] = str(resume_dir)
        options = {k: v for k, v in options.items() if k != _param_name("out_dir")}
    config = resolve_config(config_file, options, base)
    start_debug_log(Path(config.out_dir))
    show_config_summary(config)

    with _progress() as progress:
        task = progress.add_task("Training...", total=max(config.steps, 1))

        def on_step(record: dict[str, Any]) -> None:
            progress.update(
                task,
                completed=record["step"] + 1,
                description=f"Training (reward {record['mean_reward']:.3f})",
            )

        result = run_training(config, resume=resume_dir is not None, on_step=on_step)
        progress.update(task, completed=max(config.steps, 1))

    summary = (
        "[bold green]Training complete![/bold green]\n\n"
        f"  Steps:       [cyan]{result.steps_done}[/cyan]\n"
        f"  Metrics:     [cyan]{result.paths.metrics}[/cyan]\n"
        f"  Checkpoint:  [cyan]{result.paths.checkpoint(result.steps_done)}[/cyan]"
    )
    console.print(Panel(summary, border_style="green"))


@cli.command()
@config_options
@click.option(
    "--checkpoint",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Checkpoint directory (default: latest in the run directory)",
)
@handle_errors
def evaluate(config_file: Path | None, checkpoint: Path | None, **options: Any) -> None:
    """Estimate Pass@1..Pass@n for a checkpoint on the task set."""
    from aepo_desk.trainer import evaluate_run

    config = resolve_config(config_file, options)
    start_debug_log(Path(config.out_dir))
    with console.status("Sampling..."):
        result = evaluate_run(config, checkpoint)
    show_pass_at(result, f"Pass@k at step {result['checkpoint_step']}")


@cli.command()
@click.argument("dumps", nargs=-1, type=click.Path(dir_okay=False, path_type=Path))
@click.option(
    "--json-out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Also write the report as JSON",
)
@handle_errors
def diagnose(dumps: tuple[Path, ...], json_out: Path | None) -> None:
    """Summarize branching and entropy statistics of pool dumps."""
    from aepo_desk.diagnostics import diagnose as run_diagnose

    start_debug_log()

    report = run_diagnose(list(dumps))
    record = report.to_record()

    for title, name, label in (
        ("Consecutive high-entropy runs", "run_length_histogram", "run length"),
        ("Branched chains per pool", "branch_histogram", "chains"),
        ("Tool calls per trajectory", "tool_call_histogram", "calls"),
    ):
        table = Table(title=title)
        table.add_column(label, justify="right")
        table.add_column("count", justify="right")
        for key, count in record[name].items():
            table.add_row(key, str(count))
        console.print(table)

    summary = (
        f"  Pools:             [cyan]{report.pools}[/cyan]\n"
        f"  Trajectories:      [cyan]{report.trajectories}[/cyan]\n"
        f"  Isolated share:    [cyan]{report.isolated_share:.3f}[/cyan]\n"
        f"  Consecutive share: [cyan]{report.consecutive_share:.3f}[/cyan]\n"
        f"  Mean tool calls:   [cyan]{report.mean_tool_calls:.3f}[/cyan]\n"
        f"  4-gram diversity:  [cyan]{report.ngram_diversity:.3f}[/cyan]"
    )
    console.print(Panel(summary, title="Diagnostics", border_style="blue"))
    if json_out is not None:
        write_json(json_out, record)
        console.print(f"[dim]Report: {json_out}[/dim]")


@cli.command()
@click.option("--mutate", is_flag=True, help="Corrupt the AEPO gradient factor (negative control)")
@click.option("--suite", "suites", multiple=True, help="Run only this suite (repeatable)")
@click.option("--seed", type=int, default=0, show_default=True, help="Oracle seed")
@click.option(
    "--json-out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Also write the results as JSON",
)
@handle_errors
def verify(mutate: bool, suites: tuple[str, ...], seed: int, json_out: Path | None) -> None:
    """Run the numeric oracle suites; exits with status 3 when any fails."""
    from aepo_desk.verify import run_suites

    start_debug_log()

    if mutate:
        console.print("[bold yellow]Mutation enabled: AEPO gradient factor corrupted[/bold yellow]")

    table = Table(title="Oracle suites")
    table.add_column("suite")
    table.add_column("cases", justify="right")
    table.add_column("error", justify="right")
    table.add_column("tolerance", justify="right")
    table.add_column("result")

    with console.status("Running oracles...") as status:

        def on_result(result: Any) -> None:
            status.update(f"Finished {result.suite}")

        report = run_suites(seed, mutate, suites or None, on_result)

    for result in report.results:
        verdict = "[green]pass[/green]" if result.passed else "[red]FAIL[/red]"
        table.add_row(
            result.suite,
            str(result.cases),
            f"{result.error:.3e}",
            f"{result.tolerance:.1e}",
            verdict,
        )
    console.print(table)

    if json_out is not None:
        write_json(json_out, [r.to_record() for r in report.results])

    if report.failed:
        names = ", ".join(r.suite for r in report.failed)
        raise OracleFailure(f"{len(report.failed)} of {len(report.results)} suites failed: {names}")
    console.print(f"[bold green]All {len(report.results)} suites passed.[/bold green]")


@cli.command()
@config_options
@click.option(
    "--rules",
    default="aepo,grpo",
    show_default=True,
    help="Comma-separated update rules to compare",
)
@click.option(
    "--seeds",
    default="",
    help="Comma-separated seeds; each gets a seed-N sub-directory [default: the config seed]",
)
@handle_errors
def compare(config_file: Path | None, rules: str, seeds: str, **options: Any) -> None:
    """Train once per rule on identical seeds and tasks, then tabulate."""
    from aepo_desk.trainer import compare as run_compare
    from aepo_desk.trainer import head_to_head

    config = resolve_config(config_file, options)
    start_debug_log(Path(config.out_dir))
    names = [r.strip() for r in rules.split(",") if r.strip()]
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {seeds!r}") from None
    runs = max(len(names), 1) * max(len(seed_list), 1)

    with _progress() as progress:
        task = progress.add_task("Comparing...", total=max(config.steps, 1) * runs)
        done = {"n": 0}

        def on_step(record: dict[str, Any]) -> None:
            done["n"] += 1
            progress.update(task, completed=done["n"], description=f"Comparing ({record['rule']})")

        rows = run_compare(config, names, on_step, seed_list or None)

    table = Table(title="Rule comparison")
    columns = ("label", "seed", "final reward", "zeroed frac", "max H drop", "Pass@1", "Pass@n")
    for column in columns:
        table.add_column(column, justify="left" if column == "label" else "right")
    for row in rows:
        table.add_row(
            row["label"],
            str(row["seed"]),
            f"{row['final_mean_reward']:.4f}",
            f"{row['mean_zeroed_frac']:.4f}",
            f"{row['max_entropy_drop']:.4f}",
            f"{row['pass_at_1']:.4f}",
            f"{row['pass_at_n']:.4f}",
        )
    console.print(table)

    paths = RunPaths(Path(config.out_dir))
    if len(seed_list) > 1:
        tally = Table(title="Head to head")
        for column in ("label", "against", "seeds", "reward >=", "smaller H drop"):
            tally.add_column(column, justify="left" if column in ("label", "against") else "right")
        for entry in head_to_head(rows):
            tally.add_row(
                entry["label"],
                entry["against"],
                str(entry["seeds"]),
                str(entry["reward_wins"]),
                str(entry["smaller_drop"]),
            )
        console.print(tally)
        console.print(f"[dim]Tally: {paths.head_to_head}[/dim]")
    else:
        console.print(f"[dim]Per-step table: {paths.compare}[/dim]")


@cli.command("dump-tasks")
@config_options
@click.argument("output", type=click.Path(dir_okay=False, path_type=Path))
@handle_errors
def dump_tasks_command(config_file: Path | None, output: Path, **options: Any) -> None:
    """Write the configured task set to a JSONL file."""
    from aepo_desk.trainer import load_task_set
    from aepo_desk.world.tasks import dump_tasks

    config = resolve_config(config_file, options)
    start_debug_log()
    vocab = config.vocab()
    tasks = load_task_set(config, vocab)
    count = dump_tasks(tasks, output)
    depths: dict[int, int] = {}
    for t in tasks:
        depths[t.depth] = depths.get(t.depth, 0) + 1
    console.print(
        f"Wrote [cyan]{count}[/cyan] tasks to [cyan]{output}[/cyan] "
        f"[dim](by depth: {json.dumps(depths, sort_keys=True)})[/dim]"
    )


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
