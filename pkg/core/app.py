"""
Continual Unlearning Platform - Command-line Application
Thin click shell over the library: every command maps onto one library call
"""

import logging

import click
from rich.console import Console
from rich.table import Table

from unlearning.config import AblationConfig, RunConfig, parse_config, resolve_seed
from unlearning.errors import UnlearningError
from unlearning.evaluation import evaluate_checkpoint, run_concept_sweep, run_experiment
from unlearning.gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, LOSS_NAMES, run_gradcheck

logger = logging.getLogger(__name__)
console = Console()

ABLATIONS = ["mod", "act", "cal"]


def _load_config(config_path, seed):
    config = parse_config(config_path) if config_path else RunConfig()
    return resolve_seed(config, seed)


def _fail(exc: UnlearningError):
    console.print(f"[red]❌ {exc}[/red]")
    raise SystemExit(1)


def _parse_counts(value: str):
    try:
        counts = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'") from None
    if not counts or any(c < 1 for c in counts):
        raise click.BadParameter("concept counts must be positive integers")
    return counts


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging (per-step losses)")
@click.option("--quiet", "-q", is_flag=True, help="Only warnings and errors")
def cli(verbose, quiet):
    """Concept-aware continual unlearning on a synthetic multimodal world."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run configuration")
@click.option("--seed", type=click.IntRange(min=0), help="Overrides the config and CORE_UNLEARN_SEED")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory (default: config output_dir)")
@click.option("--ablate", multiple=True, type=click.Choice(ABLATIONS), help="Disable a component; may repeat")
@click.option("--no-plot", is_flag=True, help="Skip metrics.svg")
def run(config_path, seed, out_dir, ablate, no_plot):
    """Run the whole unlearning sequence and write the reports."""
    try:
        config = _load_config(config_path, seed)
        if ablate:
            flags = config.ablations.model_dump()
            flags.update({name: True for name in ablate})
            config = config.model_copy(update={"ablations": AblationConfig(**flags)})
        out_dir = out_dir or config.output_dir
        console.print(f"[blue]🎲 Seed {config.world.seed}, ablations: "
                      f"{', '.join(config.ablations.disabled()) or 'none'}[/blue]")
        report, _ = run_experiment(config, out_dir, plot=not no_plot)
    except UnlearningError as exc:
        _fail(exc)
    last = report.last
    console.print(f"[green]✅ {len(report.snapshots)} steps written to {out_dir}[/green]")
    console.print(f"Last: CRR {last.crr:.4f}  RR {last.rr:.4f}  ΔRR {last.delta_rr:.4f}  "
                  f"AR {last.ar:.4f}  S {last.specificity:.2f}")


@cli.command()
@click.option("--seed", default=0, type=click.IntRange(min=0), help="Seed for the fixed check instances")
@click.option("--corrupt", type=click.Choice(list(LOSS_NAMES)), help="Perturb one analytic gradient (fault injection)")
def gradcheck(seed, corrupt):
    """Finite-difference check of every training loss."""
    try:
        results = run_gradcheck(seed=seed, corrupt=corrupt)
    except UnlearningError as exc:
        _fail(exc)

    table = Table(title=f"Gradient check (step {DEFAULT_STEP:g}, tolerance {DEFAULT_TOLERANCE:g})")
    table.add_column("Loss", style="cyan")
    table.add_column("Max relative error", justify="right")
    table.add_column("Worst parameter")
    table.add_column("Status")
    for result in results:
        report = result.report
        status = "[green]pass[/green]" if report.passed else "[red]FAIL[/red]"
        table.add_row(result.name, f"{report.max_relative_error:.3e}",
                      f"{report.worst_parameter}{list(report.worst_index)}", status)
    console.print(table)

    failed = [r for r in results if not r.report.passed]
    for result in failed:
        console.print(f"[red]❌ {result.name} failed at {result.report.worst_parameter}"
                      f"{list(result.report.worst_index)}[/red]")
    if failed:
        raise SystemExit(1)


@cli.command(name="eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--no-plot", is_flag=True, help="Skip metrics.svg")
def evaluate(checkpoint_path, out_dir, no_plot):
    """Evaluate a saved checkpoint on the world rebuilt from its config."""
    try:
        report = evaluate_checkpoint(checkpoint_path, out_dir, plot=not no_plot)
    except UnlearningError as exc:
        _fail(exc)
    last = report.last
    console.print(f"[green]✅ Step {last.step}: CRR {last.crr:.4f}  AR {last.ar:.4f}  "
                  f"S {last.specificity:.2f}[/green]")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run configuration")
@click.option("--concepts", default="4,8,16", show_default=True, help="Comma-separated concepts per category")
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory for sweep.csv")
def sweep(config_path, concepts, seed, out_dir):
    """Rerun the sequence at several concept counts."""
    counts = _parse_counts(concepts)
    try:
        config = _load_config(config_path, seed)
        table = run_concept_sweep(config, counts, out_dir or config.output_dir)
    except UnlearningError as exc:
        _fail(exc)
    console.print(table.to_string(index=False))


def main():
    cli(prog_name="core-unlearn")
