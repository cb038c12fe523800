# [file name]: cli.py
"""
Command-line entry point.

Exit codes: 0 success, 1 configuration or checkpoint error, 2 data error,
3 at least one grid cell failed.
"""

import os
import sys

import click

from app.config import PRESET_NAMES, load_config
from ml_training.console import set_quiet, status
from ml_training.errors import CheckpointError, ConfigError, DataError, ValidationError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_COMPUTE = 3


def _fail(code, message):
    status(f"❌ {message}")
    sys.exit(code)


def _guarded(action):
    """Run `action`, mapping project exceptions to exit codes"""
    try:
        return action()
    except (ConfigError, CheckpointError, ValidationError) as e:
        _fail(EXIT_CONFIG, str(e))
    except DataError as e:
        _fail(EXIT_DATA, str(e))


def _config_options(command):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="INI experiment config"),
        click.option("--preset", help=f"Preset defaults: {', '.join(PRESET_NAMES)}"),
        click.option("--seed", type=int, help="Master seed"),
        click.option("--jobs", type=int, help="Cells run in parallel"),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory"),
        click.option("--quiet", is_flag=True, help="No status lines or progress bars"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


class ExperimentGroup(click.Group):
    """Bad or missing options exit with the configuration code, not click's 2"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_CONFIG
            raise


@click.group(cls=ExperimentGroup)
def cli():
    """Posterior distillation robustness experiments."""


@cli.command("fetch-data")
@click.option("--data-dir", default=lambda: os.getenv("BDK_DATA_DIR", "data/mnist"), show_default="BDK_DATA_DIR")
@click.option("--mirror", default=None, help="Base URL of the IDX files")
@click.option("--force", is_flag=True, help="Download even if files exist")
def fetch_data(data_dir, mirror, force):
    """Download the four MNIST IDX files."""
    from app.services.data_service import DataService

    _guarded(lambda: DataService(mirror).fetch_data(data_dir, force=force))


@cli.command("mask-preview")
@click.option("--data-dir", default=lambda: os.getenv("BDK_DATA_DIR", "data/mnist"))
@click.option("-m", "--mask-side", type=click.IntRange(0, 28), required=True)
@click.option("--count", type=click.IntRange(1, 32), default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False), default="mask_preview.png", show_default=True,
              help="PNG or SVG path")
def mask_preview(data_dir, mask_side, count, seed, output):
    """Save original and masked test images side by side."""
    from app.services.data_service import data_service

    _guarded(lambda: data_service.mask_preview(data_dir, mask_side, output, count=count, seed=seed))


@cli.command("dump-data")
@_config_options
@click.option("-n", "--n-labeled", type=int, required=True)
@click.option("-m", "--mask-side", type=click.IntRange(0, 28), required=True)
@click.option("--replicate", type=int, default=0, show_default=True)
@click.option("--target", type=click.Path(file_okay=False), required=True, help="Directory for the IDX files")
def dump_data(config_path, preset, seed, jobs, out_dir, quiet, n_labeled, mask_side, replicate, target):
    """Write one cell's masked labeled and test sets as IDX files with provenance."""
    from app.config import Cell
    from app.services.data_service import data_service
    from ml_training.seeding import cell_seed

    set_quiet(quiet)

    def action():
        cfg = load_config(config_path, preset, seed=seed, jobs=jobs, out_dir=out_dir, quiet=quiet or None)
        cell = Cell(cfg.model_family, n_labeled, mask_side, 1.0, replicate)
        return data_service.dump_cell_data(cfg, cell, cell_seed(cfg.master_seed, cell.teacher_coordinates), target)

    _guarded(action)


@cli.command()
@_config_options
def run(config_path, preset, seed, jobs, out_dir, quiet):
    """Run the configured N x m x capacity grid."""
    from app.services.experiment_service import experiment_service

    set_quiet(quiet)

    def action():
        cfg = load_config(config_path, preset, seed=seed, jobs=jobs, out_dir=out_dir, quiet=quiet or None)
        return experiment_service.run_grid(cfg)

    result = _guarded(action)
    if result["failed"]:
        _fail(EXIT_COMPUTE, f"{len(result['failed'])} cell(s) failed: {', '.join(result['failed'])}")


@cli.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
              help="Output directory of the run to continue")
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="Config to check against the stored run")
@click.option("--preset", help=f"Preset defaults: {', '.join(PRESET_NAMES)}")
@click.option("--seed", type=int)
@click.option("--jobs", type=int)
@click.option("--quiet", is_flag=True)
def resume(out_dir, config_path, preset, seed, jobs, quiet):
    """Continue an interrupted grid: finished cells are skipped, in-flight chains resume."""
    from app.services.experiment_service import experiment_service

    set_quiet(quiet)

    def action():
        cfg = None
        if config_path or preset:
            cfg = load_config(config_path, preset, seed=seed, out_dir=out_dir)
        return experiment_service.resume(out_dir, cfg=cfg, jobs=jobs, quiet=quiet or None)

    result = _guarded(action)
    if result["failed"]:
        _fail(EXIT_COMPUTE, f"{len(result['failed'])} cell(s) failed: {', '.join(result['failed'])}")


@cli.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False, exists=True), required=True)
def report(out_dir):
    """Re-emit the CSV files and SVG figures from stored cell records."""
    from app.services.report_service import report_service

    result = report_service.write_report(out_dir)
    click.echo(result["csv"])


@cli.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default=lambda: os.getenv("BDK_OUT_DIR", "results"))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=5000, show_default=True)
@click.option("--debug", is_flag=True)
def serve(out_dir, host, port, debug):
    """Serve stored results read-only over HTTP."""
    from app import create_app

    app = create_app(out_dir)
    status(f"🚀 Serving {out_dir} on http://{host}:{port}")
    app.run(host=host, port=port, debug=debug, use_reloader=False)


def main():
    cli()


if __name__ == "__main__":
    main()
