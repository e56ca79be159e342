from .estimators import accumulate_sampling_error, estimate_eps_adv, estimate_reverse_bias, estimate_sampling_bias
from .heatmaps import heatmap_grid, normalize_field, render_heatmap
from .runner import AnalysisBundle, analyze_run
from .similarity import bootstrap_mean_interval, cosine, cosine_protocol, pairwise_consistency
from .types import BiasField, CosineReport

__all__ = [
    "AnalysisBundle",
    "BiasField",
    "CosineReport",
    "accumulate_sampling_error",
    "analyze_run",
    "bootstrap_mean_interval",
    "cosine",
    "cosine_protocol",
    "estimate_eps_adv",
    "estimate_reverse_bias",
    "estimate_sampling_bias",
    "heatmap_grid",
    "normalize_field",
    "pairwise_consistency",
    "render_heatmap",
]
