"""Full model: fusion stack, regression head and (optionally) MI-Max predictors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dbf.autodiff import Tensor, no_grad
from dbf.config import TrainConfig
from dbf.fusion import FusionOutput, FusionStack, check_bottleneck_length
from dbf.heads import RegressionHead, predict, task_loss
from dbf.mimax import NceBatch, Predictors, mimax_total, pool
from dbf.nn import Module

BACKBONE_PREFIXES = ("stack.projections.", "head.")


@dataclass
class LossBreakdown:
    total: Tensor
    task: float
    mimax: float
    preds: Tensor
    fusion: FusionOutput


class DBFModel(Module):
    def __init__(self, config: TrainConfig, dims: dict[str, int], lengths: dict[str, int]):
        ab = config.ablation
        used = ab.use_modalities
        if ab.bottleneck_on:
            check_bottleneck_length(config.bottleneck_length, {m: lengths[m] for m in used})
        self.config = config
        self.stack = FusionStack(
            dims={m: dims[m] for m in used},
            lengths={m: lengths[m] for m in used},
            d=config.fusion_dim,
            n_heads=config.n_heads,
            bottleneck_length=config.bottleneck_length,
            fusion_layers=config.fusion_layers,
            pre_layers=config.pre_layers,
            bottleneck=ab.bottleneck_on,
            center=ab.center_modality,
            seed=config.seed,
        )
        self.head = RegressionHead(config.fusion_dim, config.dropout, config.seed)
        self.predictors = (
            Predictors(used, config.fusion_dim, config.seed) if ab.mimax_on else None
        )

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.stack.modalities

    def parameter_groups(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """(new fusion parameters, backbone-equivalent projections and head)."""
        new, backbone = {}, {}
        for name, p in self.named_parameters():
            (backbone if name.startswith(BACKBONE_PREFIXES) else new)[name] = p
        return new, backbone

    def forward(self, inputs: dict[str, np.ndarray], rng: np.random.Generator | None = None):
        fusion = self.stack({m: inputs[m] for m in self.modalities})
        return predict(fusion, self.head, rng), fusion

    def loss(self, inputs, labels, rng: np.random.Generator | None = None) -> LossBreakdown:
        cfg = self.config
        preds, fusion = self.forward(inputs, rng)
        mimax = Tensor(0.0)
        if self.predictors is not None and cfg.alpha > 0:
            batch = NceBatch(fusion.pooled, {m: pool(x) for m, x in fusion.fusion_inputs.items()})
            mimax = mimax_total(batch, self.predictors, cfg.alpha, cfg.temperature)
        task = task_loss(preds, labels)
        total = task + mimax
        return LossBreakdown(total, task.item(), mimax.item(), preds, fusion)

    def predict_array(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        with no_grad():
            preds, _ = self.forward(inputs)
        return preds.data.copy()
