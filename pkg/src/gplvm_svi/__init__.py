"""Generalised GPLVM trained with doubly stochastic variational inference."""
import torch

torch.set_default_dtype(torch.float64)

from .model import GPLVM, ModelVariant, init_model  # noqa: E402

__all__ = ["GPLVM", "ModelVariant", "init_model"]
__version__ = "0.1.0"
