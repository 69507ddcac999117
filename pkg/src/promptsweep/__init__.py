"""Prompt-template grid search for LLM-based evaluation metrics."""

from .dataset import DatasetSpec, Segment, load_segments, seahorse_score
from .extract import ExtractedScore, extract_score, impute_missing
from .stability import ResultCube, aggregate_ranking, select_phase2, stability_matrix, top_share
from .stats import correlation_report, kendall_tau_b, pearson, permute_input_test, spearman
from .templates import PromptSpec, builtin_catalog, expand_grid, render

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec", "Segment", "load_segments", "seahorse_score",
    "ExtractedScore", "extract_score", "impute_missing",
    "ResultCube", "aggregate_ranking", "select_phase2", "stability_matrix", "top_share",
    "correlation_report", "kendall_tau_b", "pearson", "permute_input_test", "spearman",
    "PromptSpec", "builtin_catalog", "expand_grid", "render",
]
