"""Benchmark of FHIR serialisation formats for LLM medication reconciliation."""
from .analyse import bonferroni, effect_size_r, wilcoxon_signed_rank
from .evaluate import aggregate, classify_failure, parse_model_output, score
from .fhir_ingest import cohort_filter, extract_ground_truth, load_bundle, parse_bundle
from .serialise import Strategy

__all__ = [
    "Strategy",
    "aggregate",
    "bonferroni",
    "classify_failure",
    "cohort_filter",
    "effect_size_r",
    "extract_ground_truth",
    "load_bundle",
    "parse_bundle",
    "parse_model_output",
    "score",
    "wilcoxon_signed_rank",
]

__version__ = "0.1.0"
