"""Command-line interface for the MuFL simulator."""

import logging
import math
import sys
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .artifacts import (
    INCOMPLETE_MARKER,
    LEDGER_TOTAL,
    TOTAL_LOSS,
    aggregate,
    mark_incomplete,
    read_grid_summary,
    seed_dir,
    write_grid_summary,
    write_run,
)
from .config import RunSpec, SpecError, env_log_level, parse_spec
from .oracle import run_oracles
from .orchestrator import check_invariants, run_regime
from .partition import format_partition

app = typer.Typer(help="Simulate multi-tenant federated learning with activity consolidation and splitting")
console = Console()
logger = logging.getLogger("mufl")


def setup_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else env_log_level()
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@dataclass
class CellOutcome:
    """What one grid cell produced across its repeats."""
    name: str
    summary: Dict[str, float] = field(default_factory=dict)
    partitions: List[str] = field(default_factory=list)
    problems: List[str] = field(default_factory=list)


def run_cell(name: str, spec: RunSpec, cell_dir: Path) -> CellOutcome:
    """Run every repeat of one cell and write its artifacts."""
    outcome = CellOutcome(name)
    summaries = []
    tags = {a.activity_id: a.tag for a in spec.activities}
    for seed in spec.repeat_seeds():
        run_dir = seed_dir(cell_dir, seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / INCOMPLETE_MARKER).unlink(missing_ok=True)
        logger.info("Running %s seed=%d in %s", spec.regime.mode, seed, run_dir)
        try:
            pool = spec.build_pool(seed)
            result = run_regime(spec.activities, pool, replace(spec.regime, seed=seed), spec.hyper)
        except (ValueError, KeyError) as e:
            problem = f"seed {seed}: {e}"
            outcome.problems.append(problem)
            mark_incomplete(run_dir, [problem])
            logger.error("Run failed: %s", problem)
            continue

        summaries.append(write_run(run_dir, result))
        if result.partition is not None:
            outcome.partitions.append(format_partition(result.partition, tags))
        problems = check_invariants(result)
        if problems:
            mark_incomplete(run_dir, problems)
            outcome.problems.extend(f"seed {seed}: {p}" for p in problems)
    if summaries:
        outcome.summary = aggregate(summaries)
    return outcome


def _run_cell_args(args) -> CellOutcome:
    return run_cell(*args)


def track_cells(outcomes: Iterable[CellOutcome], total: int) -> List[CellOutcome]:
    """Collect cell outcomes as they finish, with a progress line."""
    done: List[CellOutcome] = []
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
    ) as progress:
        task = progress.add_task("Running cells...", total=total)
        for outcome in outcomes:
            done.append(outcome)
            progress.update(task, advance=1, description=f"Running cells... ({len(done)}/{total})")
    return done


def _fmt_stat(summary: Dict[str, float], metric: str) -> str:
    if f"{metric}_mean" not in summary:
        return "-"
    mean, std = summary[f"{metric}_mean"], summary[f"{metric}_std"]
    return f"{mean:.4f}" if math.isnan(std) else f"{mean:.4f} ± {std:.4f}"


def show_cells(title: str, outcomes: List[CellOutcome]) -> None:
    table = Table(title=title)
    table.add_column("Cell", style="cyan", no_wrap=True)
    table.add_column("Runs", style="magenta")
    table.add_column("Total test loss", style="green")
    table.add_column("Ledger", style="yellow")
    table.add_column("Partition")
    for outcome in outcomes:
        runs = str(int(outcome.summary.get("repeats", 0)))
        table.add_row(
            outcome.name or ".",
            runs,
            _fmt_stat(outcome.summary, TOTAL_LOSS),
            _fmt_stat(outcome.summary, LEDGER_TOTAL),
            " ".join(sorted(set(outcome.partitions))) or "-",
        )
    console.print(table)


@app.command()
def run(
    spec_file: Path = typer.Argument(..., help="Path to a JSON run spec"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory (overrides the spec)"),
    seed: Optional[int] = typer.Option(None, "--seed", "-s", help="Run seed (overrides the spec)"),
    check: bool = typer.Option(False, "--check", help="Validate the spec and exit"),
    oracle: bool = typer.Option(False, "--oracle", help="Run the gradient and partition-solver self-checks"),
    jobs: int = typer.Option(1, "--jobs", "-j", help="Grid cells to run in parallel"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log every round"),
):
    """Run a regime, or a grid of regimes, described by a spec file."""
    setup_logging(verbose)

    try:
        spec = parse_spec(spec_file)
        if seed is not None:
            spec = spec.with_seed(seed)
        cells = spec.cells()
    except (FileNotFoundError, SpecError) as e:
        console.print(f"[red]Error: {escape(str(e))}[/red]")
        sys.exit(1)

    if oracle:
        reports = run_oracles(spec.regime.seed)
        table = Table(title="Self-checks")
        table.add_column("Suite", style="cyan")
        table.add_column("Cases", style="magenta")
        table.add_column("Worst", style="yellow")
        table.add_column("Seconds")
        table.add_column("Result")
        for r in reports:
            status = "[green]pass[/green]" if r.passed else f"[red]{len(r.failures)} failed[/red]"
            table.add_row(r.name, str(r.cases), f"{r.worst:.3e}", f"{r.seconds:.2f}", status)
        console.print(table)
        for r in reports:
            for failure in r.failures[:5]:
                console.print(f"  [red]{r.name}: {escape(failure)}[/red]")
        sys.exit(0 if all(r.passed for r in reports) else 1)

    if check:
        console.print(f"[green]Spec OK:[/green] {spec.regime.mode}, {len(spec.activities)} activities, "
                      f"{len(cells)} cell(s) x {spec.repeat} repeat(s)")
        return

    out_dir = out or spec.output_dir
    console.print(f"\n[cyan]Running {spec.regime.mode}[/cyan] with {len(cells)} cell(s), "
                  f"{spec.repeat} repeat(s) -> {out_dir}")

    tasks = [(name, cell, out_dir / name if name else out_dir) for name, cell in cells]
    if jobs > 1 and len(tasks) > 1:
        with Pool(min(jobs, len(tasks))) as pool:
            outcomes = track_cells(pool.imap(_run_cell_args, tasks), len(tasks))
    else:
        outcomes = track_cells((run_cell(*t) for t in tasks), len(tasks))

    write_grid_summary(out_dir, {o.name: o.summary for o in outcomes if o.summary})
    show_cells(f"Results in {out_dir}", outcomes)

    problems = [p for o in outcomes for p in o.problems]
    if problems:
        console.print(f"\n[red]Error: {len(problems)} invariant check(s) failed[/red]")
        for p in problems:
            console.print(f"  - {escape(p)}")
        sys.exit(1)
    console.print("\n[green]All invariant checks passed[/green]")


@app.command()
def show(
    out_dir: Path = typer.Argument(..., help="Output directory of an earlier run"),
):
    """Show the aggregated summary of an earlier run."""
    try:
        rows = read_grid_summary(out_dir)
    except FileNotFoundError:
        console.print(f"[red]Error: no summary found in {out_dir}[/red]")
        sys.exit(1)
    if not rows:
        console.print("[yellow]Summary is empty[/yellow]")
        return
    outcomes = [CellOutcome("" if cell == "." else cell, values) for cell, values in rows.items()]
    show_cells(f"Summary of {out_dir}", outcomes)
    incomplete = sorted(p.parent for p in out_dir.rglob(INCOMPLETE_MARKER))
    for run_dir in incomplete:
        console.print(f"[yellow]Incomplete run:[/yellow] {run_dir}")


if __name__ == "__main__":
    app()
