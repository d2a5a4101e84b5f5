"""Bottleneck multimodal fusion regularized by contrastive mutual-information maximization."""

__version__ = "0.1.0"
