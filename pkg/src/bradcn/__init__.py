"""Depth-aware bokeh rendering with a transformer render net and a depth calibration net."""
from .core import ModelConfig
from .hybrid import BradcnModel, HybridMode, build_model

__all__ = ["ModelConfig", "BradcnModel", "HybridMode", "build_model"]
