"""Saliency-guided data augmentation on a small from-scratch autodiff stack."""

from .autodiff import Graph, NonFiniteError, Tensor, backward, grad_of, no_grad
from .losses import LossReport, LossWeights
from .nn import Network, init_params, small_cnn, tiny_cnn
from .saliency import SaliencyMap, gradcam, relu_rule_saliency, smoothgrad, vanilla_saliency

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "LossReport",
    "LossWeights",
    "Network",
    "NonFiniteError",
    "SaliencyMap",
    "Tensor",
    "backward",
    "grad_of",
    "gradcam",
    "init_params",
    "no_grad",
    "relu_rule_saliency",
    "small_cnn",
    "smoothgrad",
    "tiny_cnn",
    "vanilla_saliency",
]
