"""Ternary weight splitting for binarized Transformers."""

from ._tws import (
    ConfigError,
    DegenerateTernary,
    __version__,
    account,
    binarize,
    config_hash,
    desk_config,
    knapsack,
    run_pipeline,
    split,
    synth_task,
    ternarize,
)

__all__ = [
    "ConfigError",
    "DegenerateTernary",
    "account",
    "binarize",
    "config_hash",
    "desk_config",
    "knapsack",
    "run_pipeline",
    "split",
    "synth_task",
    "ternarize",
]
