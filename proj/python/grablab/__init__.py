"""Python access to the grab_lab pipeline: log generation, masks, metrics,
training through the CLI and checkpoint scoring."""

import json

from ._core import (
    GrabError,
    auc,
    format_config,
    generate_log_lines,
    grad_check,
    mask_grids,
    measure_skew,
    run_cli,
    score,
    spearman,
)


def generate_log(config_text="", threads=1):
    """Events of a generated log as dicts, in file order."""
    return [json.loads(line) for line in generate_log_lines(config_text, threads)]


__all__ = [
    "GrabError",
    "auc",
    "format_config",
    "generate_log",
    "generate_log_lines",
    "grad_check",
    "mask_grids",
    "measure_skew",
    "run_cli",
    "score",
    "spearman",
]
