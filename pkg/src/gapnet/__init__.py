"""Granularity-aware salient object detection on a small NumPy autodiff engine."""

from .model import GAPNet, ModelConfig, ModelOutputs, build_model, count_macs, count_params

__version__ = "0.1.0"

__all__ = ["GAPNet", "ModelConfig", "ModelOutputs", "build_model", "count_macs", "count_params"]
