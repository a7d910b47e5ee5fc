"""Command line driver: one subcommand per pipeline stage.

Every subcommand takes the same four options. --seed and --workers override
the config file; --resume skips stages the run manifest already marks
complete and picks up partial trajectory generation where it stopped.
"""
from __future__ import annotations

import json
from pathlib import Path

import click

from .config import ConfigError, load_config
from .pipeline import ARTIFACTS, STAGES, PipelineError, run_stage


def _load(config_path: str, seed: int | None, workers: int | None):
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    return cfg


def _summary_line(cfg, stage: str) -> str:
    manifest = json.loads(
        (Path(cfg.run_dir) / "manifest.json").read_text(encoding="utf-8")
    )
    entry = manifest["stages"][stage]
    drops = ", ".join(f"{k}={v}" for k, v in sorted(entry["dropped"].items()))
    line = f"{stage}: kept {entry['kept']} of {entry['input']} -> {entry['artifact']}"
    return f"{line} (dropped: {drops})" if drops else line


def _stage_command(stage: str) -> click.Command:
    @click.command(name=stage, help=f"Run the {stage} stage (writes {ARTIFACTS[stage]}).")
    @click.option(
        "--config",
        "config_path",
        required=True,
        type=click.Path(exists=True, dir_okay=False),
        help="Pipeline config file (YAML).",
    )
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--resume", is_flag=True, help="Skip stages already completed.")
    @click.option("--workers", type=int, default=None, help="Override worker count.")
    def command(config_path: str, seed: int | None, resume: bool, workers: int | None):
        try:
            cfg = _load(config_path, seed, workers)
            ran = run_stage(stage, cfg, resume=resume)
        except (ConfigError, PipelineError) as exc:
            raise click.ClickException(str(exc)) from exc
        if ran:
            click.echo(_summary_line(cfg, stage))
        else:
            click.echo(f"{stage}: already complete, skipped")

    return command


@click.group(name="mcpforge")
def main() -> None:
    """Synthesize tool-call training data from MCP servers."""


for _stage in STAGES:
    main.add_command(_stage_command(_stage))


if __name__ == "__main__":
    main()
