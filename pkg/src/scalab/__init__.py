"""Sparse-coding attention: encoding/decoding dictionaries, soft-thresholded
coefficients and cross-task coefficient transfer, with the synthetic
compositional datasets and training tools around them."""

from .attention import SCAConfig, reference_mha, sca_forward, sparsity_ratio
from .model import ModelConfig, init_model, model_forward

__version__ = "0.1.0"

__all__ = [
    "SCAConfig",
    "ModelConfig",
    "sca_forward",
    "reference_mha",
    "sparsity_ratio",
    "init_model",
    "model_forward",
]
