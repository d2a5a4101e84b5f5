"""Contrastive mutual-information regularizer between the fusion result and each modality.

For every modality an MLP predicts the modality's pooled representation from
the pooled fusion result. Predictions and targets are compared by cosine
similarity, and an InfoNCE loss with in-batch negatives pushes each fusion
vector toward its own sample's modality vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dbf.autodiff import Tensor, l2_normalize, logsumexp, matmul
from dbf.errors import ContractError
from dbf.nn import MLP, Module, component_rng


class Predictors(Module):
    """One ``d -> d_hidden -> d`` GELU MLP per target modality."""

    def __init__(self, modalities, d: int, seed: int = 0, d_hidden: int | None = None):
        d_hidden = d if d_hidden is None else d_hidden
        self.mlps = {m: MLP(d, d_hidden, d, component_rng(seed, f"predictor.{m}"))
                     for m in modalities}

    def __getitem__(self, modality: str) -> MLP:
        return self.mlps[modality]

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.mlps)


@dataclass
class NceBatch:
    """Row ``i`` of ``z`` is paired with row ``i`` of every ``x[m]``."""

    z: Tensor
    x: dict[str, Tensor]

    def __post_init__(self):
        n = self.z.shape[0]
        if self.z.ndim != 2 or n < 2:
            raise ContractError(
                f"InfoNCE needs a batch of at least 2 rows to draw negatives, got {self.z.shape}"
            )
        for m, xm in self.x.items():
            if xm.shape != self.z.shape:
                raise ContractError(f"modality {m}: shape {xm.shape} != fusion shape {self.z.shape}")

    @property
    def size(self) -> int:
        return self.z.shape[0]


def pool(seq: Tensor) -> Tensor:
    """Mean over the position axis (second to last)."""
    if seq.shape[-2] < 1:
        raise ContractError("cannot pool an empty sequence")
    return seq.mean(axis=-2)


def similarity(x_m: Tensor, z: Tensor, predictor: MLP) -> Tensor:
    """Cosine between a modality vector and the predictor's reconstruction of it from ``z``."""
    return (l2_normalize(x_m) * l2_normalize(predictor(z))).sum(axis=-1)


def similarity_matrix(x_m: Tensor, z: Tensor, predictor: MLP) -> Tensor:
    """``s[i, j] = similarity(x_m[j], z[i])``."""
    return matmul(l2_normalize(predictor(z)), l2_normalize(x_m).transpose())


def infonce_from_logits(s: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean over rows of ``logsumexp_j(s_ij / T) - s_ii / T``; the positive stays in the denominator."""
    n = s.shape[0]
    if n < 2:
        raise ContractError("InfoNCE needs at least 2 rows")
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    scaled = s * (1.0 / temperature)
    positives = (scaled * np.eye(n)).sum(axis=-1)
    return (logsumexp(scaled, axis=-1) - positives).mean()


def infonce_loss(batch: NceBatch, modality: str, predictors: Predictors,
                 temperature: float = 1.0) -> Tensor:
    s = similarity_matrix(batch.x[modality], batch.z, predictors[modality])
    return infonce_from_logits(s, temperature)


def mi_lower_bound(loss: float, batch_size: int) -> float:
    """InfoNCE bound on I(X; Z): ln B - L."""
    return math.log(batch_size) - float(loss)


def mimax_total(batch: NceBatch, predictors: Predictors | None, alpha: float,
                temperature: float = 1.0) -> Tensor:
    """``alpha`` times the sum of per-modality InfoNCE losses.

    ``alpha == 0`` (or no predictors) returns a constant zero that is not
    connected to the graph, so nothing flows into the predictors.
    """
    if alpha < 0:
        raise ContractError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0 or predictors is None:
        return Tensor(0.0)
    total = None
    for m in predictors.modalities:
        if m not in batch.x:
            continue
        term = infonce_loss(batch, m, predictors, temperature)
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * alpha
