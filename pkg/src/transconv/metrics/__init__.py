"""Evaluation metrics for generated time series."""
from .divergence import jsd, jsd_from_probs
from .fid import (ContextEncoder, EncoderConfig, context_fid, frechet_distance, gaussian_fit,
                  train_context_encoder)
from .kde import binned_kde, emit_kde, kde_curves, silverman_bandwidth
from .report import METRIC_LABELS, MetricConfig, MetricReport, evaluate, render_metric_table
from .scores import HelperBudget, discriminative_score, predictive_score, stratified_split

__all__ = [
    "jsd", "jsd_from_probs", "ContextEncoder", "EncoderConfig", "context_fid", "frechet_distance",
    "gaussian_fit", "train_context_encoder", "binned_kde", "emit_kde", "kde_curves",
    "silverman_bandwidth", "METRIC_LABELS", "MetricConfig", "MetricReport", "evaluate",
    "render_metric_table", "HelperBudget", "discriminative_score", "predictive_score", "stratified_split",
]
