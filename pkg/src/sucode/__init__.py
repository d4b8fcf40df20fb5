"""Semantic-aware codebook pipeline for underwater image enhancement."""

from .config import RunConfig, parse_config
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .quantize import (CodebookSet, QuantizationResult, UsageStats,
                       aggregate_weighted, downsample_mask, init_codebooks,
                       nearest_code, straight_through, usage_stats)
from .trainer import count_cost, enhance, run_stage, stage_plan

__all__ = [
    "RunConfig", "parse_config",
    "CheckpointBundle", "load_checkpoint", "save_checkpoint",
    "CodebookSet", "QuantizationResult", "UsageStats",
    "aggregate_weighted", "downsample_mask", "init_codebooks",
    "nearest_code", "straight_through", "usage_stats",
    "count_cost", "enhance", "run_stage", "stage_plan",
]

__version__ = "0.1.0"
