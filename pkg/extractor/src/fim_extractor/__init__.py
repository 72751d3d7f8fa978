"""Diagonal Fisher extraction for full-scale checkpoints."""

__version__ = "0.1.0"

from .extract import ExtractorConfig, extract, reduce_per_layer, sample_tokens

__all__ = ["ExtractorConfig", "extract", "reduce_per_layer", "sample_tokens"]
