"""``trap train|attack|eval|sweep|report --config <path> [--seed N] [--out DIR]``."""

from __future__ import annotations

import logging
import sys

import click

from trap import pipeline
from trap.config import ConfigError, load_config, with_overrides
from trap.data import IDXFormatError
from trap.report import ReportError
from trap.zoo import CheckpointError


def _command(name):
    @click.command(name, help=f"Run the {name} stage.")
    @click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                  help="Experiment config file.")
    @click.option("--seed", type=int, default=None, help="Override experiment.seed.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                  help="Override report.out_dir.")
    @click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
    def cmd(config_path, seed, out_dir, verbose):
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        try:
            cfg = with_overrides(load_config(config_path), seed=seed, out_dir=out_dir)
            manifest = pipeline.run_experiment(cfg, name)
        except FileNotFoundError as exc:
            raise click.ClickException(f"file not found: {exc.filename}") from None
        except (ConfigError, pipeline.PipelineError, IDXFormatError, CheckpointError, ReportError) as exc:
            raise click.ClickException(str(exc)) from None
        click.echo(str(manifest))

    return cmd


@click.group()
def main():
    """Transferable and robust adversarial perturbation experiments."""


for _name in pipeline.SUBCOMMANDS:
    main.add_command(_command(_name))


if __name__ == "__main__":
    main()
