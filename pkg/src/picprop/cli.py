"""Command-line entry point: run, plot, list, validate-config."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import RUN_KINDS, ConfigError, load_config

EXIT_SCHEMA = 2
EXIT_PARTIAL = 1


def _report_schema(exc: ConfigError) -> None:
    click.echo("invalid configuration:", err=True)
    for loc, msg in exc.errors:
        click.echo(f"  {loc}: {msg}", err=True)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Confidence bands for PDE solutions from uncertain boundary data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("-o", "--output", type=click.Path(file_okay=False, path_type=Path), help="Output root (overrides $PICPROP_OUTPUT_ROOT).")
@click.option("-w", "--workers", type=click.IntRange(min=1), default=None, help="Worker threads for independent jobs.")
def run(config: Path, output: Path | None, workers: int | None) -> None:
    """Execute a run described by CONFIG and print the run directory."""
    from .runner import PartialFailure
    from .runner import run as do_run

    try:
        run_dir = do_run(config, output, workers)
    except ConfigError as exc:
        _report_schema(exc)
        sys.exit(EXIT_SCHEMA)
    except PartialFailure as exc:
        click.echo(f"{exc} ({exc.run_dir})", err=True)
        click.echo(str(exc.run_dir))
        sys.exit(EXIT_PARTIAL)
    click.echo(str(run_dir))


@main.command("validate-config")
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def validate_config(config: Path) -> None:
    """Check CONFIG against the schema without running it."""
    try:
        cfg = load_config(config)
    except ConfigError as exc:
        _report_schema(exc)
        sys.exit(EXIT_SCHEMA)
    click.echo(f"ok: {cfg.method.kind} on {cfg.problem.name}")


@main.command()
@click.argument("run_dir", type=click.Path(path_type=Path))
def plot(run_dir: Path) -> None:
    """Render figures for RUN_DIR."""
    from .plotting import PlotError, plot_run

    try:
        paths = plot_run(run_dir)
    except PlotError as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    for p in paths:
        click.echo(str(p))


@main.command("list")
@click.option("-o", "--output", type=click.Path(file_okay=False, path_type=Path), help="Output root to scan.")
@click.option("--kinds", is_flag=True, help="List the available run kinds instead.")
def list_runs(output: Path | None, kinds: bool) -> None:
    """List run directories under the output root."""
    if kinds:
        for k in RUN_KINDS:
            click.echo(k)
        return
    import os

    from .runner import DEFAULT_ROOT, OUTPUT_ENV

    root = output or Path(os.environ.get(OUTPUT_ENV) or DEFAULT_ROOT)
    if not root.is_dir():
        click.echo(f"no runs under {root}", err=True)
        return
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        prov = d / "provenance.json"
        info = json.loads(prov.read_text()) if prov.exists() else {}
        click.echo(f"{d.name}\t{info.get('kind', '?')}\t{info.get('status', '?')}\t{info.get('seconds', '')}")


if __name__ == "__main__":
    main()
