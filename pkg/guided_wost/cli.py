import functools
import logging
import os
import click
from . import Solver, load_config
from .presets import PRESETS, PRESET_PREFIX
from .image import compute_relmse, read_field_output, relmse_delta, write_field_output
from .utils import write_rows
from .errors import WostError


def handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except WostError as e:
            raise click.ClickException(str(e))

    return wrapper


def make_solver(config, **overrides):
    """``config`` is a JSON run configuration or a ``preset:<name>`` scene reference."""
    if overrides.get("out"):
        overrides["out"] = os.path.abspath(overrides["out"])
    if config.startswith(PRESET_PREFIX):
        overrides.setdefault("scene", config)
        return Solver(load_config(), **overrides)
    return Solver(load_config(config), **overrides)


run_options = [
    click.option("--wpp", type=click.INT, help="Walks per evaluation point"),
    click.option("--seed", type=click.INT, help="Random seed"),
    click.option(
        "--sampler", help="uniform, guiding_only, fixed_mis, learnable_mis or module:Class"
    ),
    click.option("--train-until", type=click.INT, help="Stop training after this many wpp"),
    click.option("--k", type=click.INT, help="Number of vMF lobes"),
    click.option("--out", type=click.Path(file_okay=False), help="Output directory"),
]


def with_run_options(func):
    for option in reversed(run_options):
        func = option(func)
    return func


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity")
def wost(verbose):
    """Guided walk on stars solver for 2D Poisson problems"""
    level = logging.WARNING if not verbose else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@wost.command()
@click.argument("config")
@with_run_options
@handle_errors
def solve(config, **overrides):
    """Solve a scene over its evaluation grid"""
    solver = make_solver(config, **overrides)
    result = solver.run_solve()
    stats = result.walk_stats
    click.echo(f"{stats.walks} walks, {stats.steps} steps in {result.seconds:.2f}s")
    if result.relmse is not None:
        click.echo(f"relMSE: {result.relmse:.6g}")
    if solver.config.out:
        click.echo(f"Outputs written to {solver.out_dir}")


@wost.command()
@click.argument("config")
@click.option("--wpp-ref", type=click.INT, help="Walks per point (default 64x the run wpp)")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="csv or pfm file")
@handle_errors
def reference(config, wpp_ref, out):
    """Generate a reference solution (exact for analytic presets)"""
    solver = make_solver(config)
    image = solver.generate_reference(wpp_ref)
    write_field_output(image, out)
    click.echo(f"Reference written to {out}")


@wost.command()
@click.argument("estimate", type=click.Path(exists=True, dir_okay=False))
@click.argument("ref", type=click.Path(exists=True, dir_okay=False))
@handle_errors
def compare(estimate, ref):
    """Print the relMSE of an estimate against a reference"""
    ref_img = read_field_output(ref)
    click.echo(f"relMSE: {compute_relmse(read_field_output(estimate), ref_img):.6g}")
    click.echo(f"delta: {relmse_delta(ref_img):.6g}")


@wost.command()
@click.argument("config")
@click.option(
    "--modes",
    "-m",
    multiple=True,
    required=True,
    help="Sampler mode, optionally with ,k=N ,train_until=N ,reflection=BOOL ,fixed_c=C",
)
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False))
@with_run_options
@handle_errors
def ablate(config, modes, reference_path, **overrides):
    """Run several sampler modes with identical seeds and budget"""
    solver = make_solver(config, **overrides)
    reference_path = os.path.abspath(reference_path) if reference_path else None
    results = solver.run_ablation(list(modes), reference_path)
    width = max(len(m) for m in modes)
    for variant, result in results:
        click.echo(
            f"{variant:<{width}}  relMSE {result.relmse:.6g}  {result.seconds:.2f}s"
            f"  (training {result.train_stats.seconds:.2f}s)"
        )
    if solver.config.out:
        click.echo(f"Table written to {os.path.join(solver.out_dir, 'ablation.csv')}")


@wost.command()
@click.argument("config")
@handle_errors
def scene(config):
    """Print the scene of a run configuration as JSON"""
    solver = make_solver(config)
    click.echo(solver.dump_scene())


@wost.command()
def presets():
    """List the built-in scenes"""
    for name, p in sorted(PRESETS.items()):
        tag = " [analytic]" if p.analytic else ""
        click.echo(f"{name}{tag}: {p.description}")


@wost.command()
@click.argument("table", type=click.Path(dir_okay=False))
@click.argument("runs", nargs=-1, type=click.Path(exists=True, file_okay=False))
@click.option("--ref", type=click.Path(exists=True, dir_okay=False), required=True)
@handle_errors
def collect(table, runs, ref):
    """Tabulate the relMSE of several solve output directories"""
    ref_img = read_field_output(ref)
    rows = []
    for run in runs:
        est = read_field_output(os.path.join(run, "solution.csv"))
        rows.append((run, compute_relmse(est, ref_img)))
    write_rows(table, ("run", "relmse"), rows)
    click.echo(f"{len(rows)} runs written to {table}")


def main():
    wost()
