"""Distilled transformer network for binary forgery classification, on numpy."""

__version__ = "0.1.0"

from .config import DtnConfig, LossWeights, RunConfig, VariantSpec
from .model import Dtn, dtn_forward, init_params
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Dtn",
    "DtnConfig",
    "LossWeights",
    "RunConfig",
    "Tensor",
    "VariantSpec",
    "backward",
    "dtn_forward",
    "init_params",
    "no_grad",
]
