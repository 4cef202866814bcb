"""Experiment layer: model files, metrics, configuration, drivers and the CLI."""
from .metrics import MetricsRow, improvement_factor, mre, ssim
from .models import initial_model, layered_model, load_and_slice, marmousi_like, slice_model

__all__ = [
    "MetricsRow",
    "improvement_factor",
    "initial_model",
    "layered_model",
    "load_and_slice",
    "marmousi_like",
    "mre",
    "slice_model",
    "ssim",
]
