"""Command-line interface: simulate, analyze, bootstrap.

Exit codes: 0 success, 1 numerical or statistical failure (separation,
positivity, estimation or bootstrap failure), 2 usage or schema errors. All
output files are byte-deterministic given the inputs and the seed. The
``PATS_WORKERS`` environment variable sets the simulation worker count
(default: the available CPU parallelism).
"""

from __future__ import annotations

import os
import sys

import click

from .analysis import load_config, run_analysis
from .errors import PatsError, SpecificationError, UnsupportedFeatureError
from .estimators import EstimatorKind
from .inference import BootstrapMode
from .simulation import SCENARIO_NAMES, run_replications

_USAGE_ERRORS = (SpecificationError, UnsupportedFeatureError)


def _workers() -> int:
    raw = os.environ.get("PATS_WORKERS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise click.UsageError(f"PATS_WORKERS must be an integer, got {raw!r}")
    if value < 1:
        raise click.UsageError("PATS_WORKERS must be at least 1")
    return value


def _parse_estimators(text: str) -> list[EstimatorKind]:
    if text.strip() == "all":
        return list(EstimatorKind)
    kinds = []
    for name in text.split(","):
        name = name.strip()
        try:
            kinds.append(EstimatorKind(name))
        except ValueError:
            valid = ", ".join(k.value for k in EstimatorKind)
            raise click.UsageError(f"unknown estimator {name!r}; valid: all, {valid}")
    return kinds


@click.group()
def main():
    """Estimation of adaptive and partially adaptive treatment strategies."""


@main.command()
@click.option("--scenario", "scenario_name", required=True, help="Scenario name.")
@click.option("--n", type=int, required=True, help="Subjects per replication.")
@click.option("--reps", type=int, required=True, help="Number of replications.")
@click.option(
    "--estimators", default="all", show_default=True,
    help="Comma-separated estimator kinds, or 'all'.",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--out", default="simreport", show_default=True,
    help="Output prefix; writes <out>.csv and <out>.txt.",
)
def simulate(scenario_name, n, reps, estimators, seed, out):
    """Run a simulation study and write its report as CSV and aligned table."""
    if scenario_name not in SCENARIO_NAMES:
        raise click.UsageError(
            f"unknown scenario {scenario_name!r}; valid names: {', '.join(SCENARIO_NAMES)}"
        )
    kinds = _parse_estimators(estimators)
    try:
        report = run_replications(
            scenario_name, n, reps, kinds, seed, workers=_workers()
        )
    except _USAGE_ERRORS as exc:
        raise click.UsageError(str(exc))
    except PatsError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    with open(f"{out}.csv", "w") as fh:
        fh.write(report.to_csv())
    table = report.to_table()
    with open(f"{out}.txt", "w") as fh:
        fh.write(table)
    click.echo(table, nl=False)


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Output path (default from output_format).")
def analyze(config_path, out):
    """Fit the configured estimator on a CSV dataset with bootstrap CIs."""
    _run_config(config_path, out, mode_override=None)


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--mode", type=click.Choice([m.value for m in BootstrapMode]), default=None,
    help="Override the configured bootstrap mode.",
)
@click.option("--out", default=None, help="Output path (default from output_format).")
def bootstrap(config_path, mode, out):
    """Bootstrap inference (plain or adaptive m-out-of-n) for a CSV dataset."""
    _run_config(config_path, out, mode_override=mode)


def _run_config(config_path, out, mode_override):
    try:
        config = load_config(config_path)
        if mode_override is not None:
            from dataclasses import replace

            config = replace(
                config,
                bootstrap=replace(config.bootstrap, mode=BootstrapMode(mode_override)),
            )
        report = run_analysis(config)
    except _USAGE_ERRORS as exc:
        raise click.UsageError(str(exc))
    except (PatsError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    if config.output_format == "csv":
        text, default_out = report.to_csv(), "estimates.csv"
    else:
        text, default_out = report.to_table(), "estimates.txt"
    path = out or default_out
    with open(path, "w") as fh:
        fh.write(text)
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
