"""Frame saliency from attention weights and its sharpness statistics.

Saliency for a bottleneck model is the attention the bottleneck slots pay to
visual frames inside the visual modality's pass. Without a bottleneck the
text queries' attention to visual keys in the joint pass is used instead, so
both kinds of model can be compared on the same footing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dbf.autodiff import no_grad
from dbf.errors import ContractError, UndefinedStatisticError
from dbf.fusion import FusionOutput


def influential_layer(output: FusionOutput) -> int:
    """Last fusion layer whose visual attention can still change the fusion result.

    In a bottleneck stack the visual pass of the final layer only produces
    ``X_v^L`` and a bottleneck that nothing reads, so the visual attention that
    matters is one layer earlier. In the joint pass it is the final layer.
    """
    n = len({lay for lay, _ in output.attention})
    return n - 2 if output.bottleneck and n >= 2 else n - 1


def frame_saliency(output: FusionOutput, layer: int | None = None) -> np.ndarray:
    """Per-sample visual frame weights, shape (batch, l_v), each row summing to 1.

    ``layer=None`` selects :func:`influential_layer`; negative indices count
    from the final fusion layer.
    """
    if "v" not in output.layout:
        raise ContractError("frame saliency needs the visual modality")
    layers = sorted({lay for lay, _ in output.attention})
    index = influential_layer(output) if layer is None else layers[layer]
    if output.bottleneck:
        weights = output.attention[(index, "v")].weights
        l_v = output.layout["v"].stop
        rows = weights[:, :, l_v:l_v + output.bottleneck_length, :l_v]
    else:
        weights = output.attention[(index, "all")].weights
        query = output.layout["t"] if "t" in output.layout else output.layout[output.center]
        rows = weights[:, :, query, output.layout["v"]]
    sal = rows.mean(axis=(1, 2))
    return sal / sal.sum(axis=-1, keepdims=True)


def sharpness_stats(saliency) -> tuple[float, float]:
    """(population std, entropy / log L) of one distribution over frames."""
    p = np.asarray(saliency, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise UndefinedStatisticError("sharpness needs a distribution over at least 2 frames")
    if abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
        raise ContractError("saliency must be a probability distribution")
    if p.max() == p.min():
        return 0.0, 1.0
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return float(p.std()), min(max(entropy / math.log(p.size), 0.0), 1.0) + 0.0


@dataclass
class SharpnessReport:
    label: str
    std_dev: float
    normalized_entropy: float
    n_samples: int
    per_layer: list[tuple[int, float, float]] = field(default_factory=list)
    mean_saliency: np.ndarray | None = None

    def to_text(self) -> str:
        lines = [
            f"label={self.label}",
            f"std_dev={self.std_dev!r}",
            f"normalized_entropy={self.normalized_entropy!r}",
            f"n_samples={self.n_samples}",
        ]
        for layer, std, ent in self.per_layer:
            lines.append(f"layer{layer}.std_dev={std!r}")
            lines.append(f"layer{layer}.normalized_entropy={ent!r}")
        return "\n".join(lines) + "\n"

    def series_tsv(self) -> str:
        rows = ["frame\tweight"]
        if self.mean_saliency is not None:
            rows += [f"{i}\t{w!r}" for i, w in enumerate(self.mean_saliency.tolist())]
        return "\n".join(rows) + "\n"


def _stats_over(sal: np.ndarray) -> tuple[float, float]:
    stats = np.array([sharpness_stats(row) for row in sal])
    return float(stats[:, 0].mean()), float(stats[:, 1].mean())


def sharpness_report(outputs: list[FusionOutput], label: str,
                     layer: int | None = None) -> SharpnessReport:
    """Average per-sample statistics over every sample in ``outputs``."""
    sal = np.concatenate([frame_saliency(o, layer) for o in outputs])
    std, ent = _stats_over(sal)
    n_layers = len({lay for lay, _ in outputs[0].attention})
    per_layer = []
    for li in range(n_layers):
        s = np.concatenate([frame_saliency(o, li) for o in outputs])
        per_layer.append((li, *_stats_over(s)))
    return SharpnessReport(label, std, ent, int(sal.shape[0]), per_layer, sal.mean(axis=0))


def model_sharpness(model, dataset, label: str, layer: int | None = None,
                    batch_size: int = 256) -> SharpnessReport:
    outputs = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            inputs, _ = dataset.batch(idx)
            _, fusion = model.forward(inputs)
            outputs.append(fusion)
    return sharpness_report(outputs, label, layer)
