"""Analysis tools: confidence histograms, CKA, GIST statistics, t-SNE and per-class reports."""
from onedatum.lens.cka import FeatureMatrix, cka_heatmap, default_taps, layer_features, linear_cka
from onedatum.lens.gist import (
    GistConfig,
    count_modes,
    gabor_bank,
    gist_descriptor,
    gist_distance_histogram,
    gist_distances,
    l2_normalize,
)
from onedatum.lens.reports import (
    Histogram,
    confidence_histogram,
    confidence_scores,
    embed_2d,
    penultimate_features,
    per_class_report,
    teacher_top1_frequency,
    write_embedding,
)

__all__ = [
    "FeatureMatrix", "cka_heatmap", "default_taps", "layer_features", "linear_cka", "GistConfig",
    "count_modes", "gabor_bank", "gist_descriptor", "gist_distance_histogram", "gist_distances",
    "l2_normalize", "Histogram", "confidence_histogram", "confidence_scores", "embed_2d",
    "penultimate_features", "per_class_report", "teacher_top1_frequency", "write_embedding",
]
