"""Sentiment-intensity regression head and the training objective."""

from __future__ import annotations

import numpy as np

from dbf.autodiff import Tensor, dropout, gelu
from dbf.errors import ContractError
from dbf.fusion import FusionOutput
from dbf.nn import Linear, Module, component_rng


class RegressionHead(Module):
    """``d -> d/2 -> 1`` GELU MLP over the pooled fusion vector."""

    def __init__(self, d: int, dropout: float = 0.1, seed: int = 0):
        rng = component_rng(seed, "head")
        self.dropout = dropout
        self.fc1 = Linear(d, max(d // 2, 1), rng)
        self.fc2 = Linear(max(d // 2, 1), 1, rng)

    def __call__(self, pooled: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = dropout(gelu(self.fc1(pooled)), self.dropout, rng)
        return self.fc2(h).reshape(pooled.shape[:-1])


def predict(fusion: FusionOutput, head: RegressionHead,
            rng: np.random.Generator | None = None) -> Tensor:
    """Scalar prediction per sample; pass ``rng`` only in training mode to enable dropout."""
    return head(fusion.pooled, rng)


def task_loss(preds: Tensor, labels, mimax: Tensor | float = 0.0) -> Tensor:
    """Mean absolute error plus the (already weighted) MI-Max term."""
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or labels.size < 1:
        raise ContractError(
            f"predictions {preds.shape} and labels {labels.shape} must have equal nonzero length"
        )
    return (preds - labels).abs().mean() + mimax
