"""Python access to the emblora core: metrics, block selection, generation and the CLI."""

from ._core import (
    ContractError,
    Model,
    color_correct,
    contrastive_from_similarities,
    control_policy,
    effective_prompt,
    final_keep_count,
    hf_ratio,
    hfrd,
    histogram_loss,
    load_adapter_meta,
    moving_average,
    read_png,
    run_cli,
    select_style_blocks,
    style_keep_count,
    write_png,
)

__all__ = [
    "ContractError",
    "Model",
    "color_correct",
    "contrastive_from_similarities",
    "control_policy",
    "effective_prompt",
    "final_keep_count",
    "hf_ratio",
    "hfrd",
    "histogram_loss",
    "load_adapter_meta",
    "moving_average",
    "read_png",
    "run_cli",
    "select_style_blocks",
    "style_keep_count",
    "write_png",
]
