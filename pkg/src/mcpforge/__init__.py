"""Training-data synthesis for tool-calling agents, sourced from MCP servers.

The pipeline onboards live servers, generates candidate tasks against their
tool inventories, filters the tasks with a model judge, rolls out agent
trajectories, filters those again, widens the corpus with irrelevance,
diversification, and multi-turn extensions, and exports the result as JSONL
plus an SFT selection. `mcpforge --help` lists the stage commands.
"""
from .config import (
    BackendConfig,
    ConfigError,
    PipelineConfig,
    PolicyConfig,
    config_hash,
    load_config,
    parse_config,
)
from .pipeline import STAGES, PipelineError, ResumeError, Runtime, run_all, run_stage

__all__ = [
    "BackendConfig",
    "ConfigError",
    "PipelineConfig",
    "PolicyConfig",
    "PipelineError",
    "ResumeError",
    "Runtime",
    "STAGES",
    "config_hash",
    "load_config",
    "parse_config",
    "run_all",
    "run_stage",
]

__version__ = "0.1.0"
