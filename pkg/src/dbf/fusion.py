"""Bottleneck fusion stack and the unrestricted-attention baseline.

In each bottleneck fusion layer every modality runs its own encoder pass over
``[X_m || B]``; the bottleneck slices coming out of the three passes are
averaged to form the next ``B``. Modalities never attend to each other
directly, so information from one modality reaches another only one layer
after it entered the bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dbf.autodiff import Tensor, broadcast_to, concat
from dbf.errors import ConfigError, ContractError, ShapeError
from dbf.nn import Module, component_rng, parameter
from dbf.transformer import AttentionRecord, EncoderLayer, ModalityProjection

MODALITIES = ("t", "v", "a")
BOTTLENECK_INIT_STD = 0.02


@dataclass
class BottleneckState:
    b: Tensor
    layer: int = 0


@dataclass
class FusionOutput:
    """Result of one forward pass over a batch.

    ``attention`` maps ``(fusion layer, modality)`` to its record; the vanilla
    baseline uses the modality tag ``"all"``. ``layout`` gives, per modality,
    the key/query slice the modality occupies inside the attention records.
    """

    z: Tensor
    pooled: Tensor
    attention: dict[tuple[int, str], AttentionRecord]
    final_unimodal: dict[str, Tensor]
    fusion_inputs: dict[str, Tensor]
    layout: dict[str, slice]
    center: str
    bottleneck: bool
    bottleneck_length: int = 0
    pre_attention: list[AttentionRecord] = field(default_factory=list)


def init_bottleneck(l_b: int, d: int, seed: int) -> BottleneckState:
    """Trainable bottleneck embeddings drawn i.i.d. from N(0, 0.02^2)."""
    if l_b < 1:
        raise ContractError(f"bottleneck length must be >= 1, got {l_b}")
    rng = component_rng(seed, "bottleneck")
    return BottleneckState(parameter(rng.normal(0.0, BOTTLENECK_INIT_STD, size=(l_b, d))), 0)


def check_bottleneck_length(l_b: int, lengths: dict[str, int]) -> None:
    shortest = min(lengths.values())
    if l_b < 1 or 2 * l_b > shortest:
        raise ConfigError(
            f"bottleneck length {l_b} must satisfy 1 <= l_b <= min(l_m)/2 = {shortest / 2:g}"
        )


def _batched_bottleneck(b: Tensor, batch: int) -> Tensor:
    if b.ndim == 2:
        return broadcast_to(b, (batch, *b.shape))
    return b


def fusion_layer(
    xs: dict[str, Tensor],
    state: BottleneckState,
    layers: dict[str, EncoderLayer],
) -> tuple[dict[str, Tensor], BottleneckState, dict[str, AttentionRecord]]:
    """One bottleneck layer: a private pass per modality, then average the bottleneck slices."""
    widths = {x.shape[-1] for x in xs.values()}
    batches = {x.shape[0] for x in xs.values()}
    if len(widths) != 1 or len(batches) != 1:
        raise ContractError(
            "modalities disagree in batch size or width: "
            + ", ".join(f"{m}={x.shape}" for m, x in xs.items())
        )
    b = _batched_bottleneck(state.b, batches.pop())
    l_b = b.shape[1]
    out: dict[str, Tensor] = {}
    slices: list[Tensor] = []
    records: dict[str, AttentionRecord] = {}
    for m, x in xs.items():
        length = x.shape[1]
        y, rec = layers[m](concat([x, b], axis=1), layer=state.layer, modality=m)
        out[m] = y[:, :length]
        slices.append(y[:, length:length + l_b])
        records[m] = rec
    b_next = slices[0]
    for s in slices[1:]:
        b_next = b_next + s
    if len(slices) > 1:
        b_next = b_next * (1.0 / len(slices))
    return out, BottleneckState(b_next, state.layer + 1), records


class FusionStack(Module):
    """Projections, per-modality pre-encoders and M fusion layers.

    With ``bottleneck=False`` each fusion layer is a single encoder pass over
    the concatenation of all modalities (the ablation baseline).
    """

    def __init__(
        self,
        dims: dict[str, int],
        lengths: dict[str, int],
        d: int = 128,
        n_heads: int = 4,
        bottleneck_length: int = 2,
        fusion_layers: int = 4,
        pre_layers: int = 1,
        bottleneck: bool = True,
        center: str = "t",
        seed: int = 0,
    ):
        modalities = tuple(m for m in MODALITIES if m in dims)
        if not modalities:
            raise ConfigError("at least one modality is required")
        if set(dims) != set(lengths):
            raise ConfigError("dims and lengths must name the same modalities")
        if center not in modalities:
            raise ConfigError(f"center modality {center!r} is not among {modalities}")
        if fusion_layers < 1:
            raise ConfigError("at least one fusion layer is required")
        self.modalities = modalities
        self.dims = {m: dims[m] for m in modalities}
        self.lengths = {m: lengths[m] for m in modalities}
        self.d = d
        self.center = center
        self.use_bottleneck = bottleneck
        self.bottleneck_length = bottleneck_length if bottleneck else 0

        self.projections = {
            m: ModalityProjection(dims[m], d, lengths[m], component_rng(seed, f"proj.{m}"))
            for m in modalities
        }
        self.pre = {
            m: [EncoderLayer(d, n_heads, component_rng(seed, f"pre.{m}.{i}"))
                for i in range(pre_layers)]
            for m in modalities
        }
        if bottleneck:
            self.bottleneck = init_bottleneck(bottleneck_length, d, seed).b
            self.fusion = [
                {m: EncoderLayer(d, n_heads, component_rng(seed, f"fusion.{i}.{m}"))
                 for m in modalities}
                for i in range(fusion_layers)
            ]
        else:
            self.vanilla = [
                EncoderLayer(d, n_heads, component_rng(seed, f"vanilla.{i}"))
                for i in range(fusion_layers)
            ]

    @property
    def n_fusion_layers(self) -> int:
        return len(self.fusion) if self.use_bottleneck else len(self.vanilla)

    def encoder_layers(self) -> list[EncoderLayer]:
        layers = [layer for m in self.modalities for layer in self.pre[m]]
        if self.use_bottleneck:
            layers += [lay[m] for lay in self.fusion for m in self.modalities]
        else:
            layers += list(self.vanilla)
        return layers

    def encode_unimodal(self, inputs: dict[str, Tensor | np.ndarray]):
        xs: dict[str, Tensor] = {}
        records: list[AttentionRecord] = []
        for m in self.modalities:
            if m not in inputs:
                raise ShapeError(f"missing input for modality {m!r}")
            x = inputs[m] if isinstance(inputs[m], Tensor) else Tensor(inputs[m])
            if x.ndim == 2:
                x = x.reshape(1, *x.shape)
            try:
                x = self.projections[m](x)
            except (ShapeError, ContractError) as exc:
                raise type(exc)(f"modality {m}: {exc}") from exc
            for i, layer in enumerate(self.pre[m]):
                x, rec = layer(x, layer=i, modality=m)
                records.append(rec)
            xs[m] = x
        return xs, records

    def __call__(self, inputs: dict[str, Tensor | np.ndarray]) -> FusionOutput:
        if self.use_bottleneck:
            return fusion_forward(inputs, self)
        return vanilla_fusion_forward(inputs, self)


def fusion_forward(inputs, stack: FusionStack) -> FusionOutput:
    xs, pre_records = stack.encode_unimodal(inputs)
    fusion_inputs = dict(xs)
    state = BottleneckState(stack.bottleneck, 0)
    attention: dict[tuple[int, str], AttentionRecord] = {}
    for layers in stack.fusion:
        layer_index = state.layer
        xs, state, records = fusion_layer(xs, state, layers)
        for m, rec in records.items():
            attention[(layer_index, m)] = rec
    z = xs[stack.center]
    layout = {m: slice(0, stack.lengths[m]) for m in stack.modalities}
    return FusionOutput(
        z=z,
        pooled=z.mean(axis=-2),
        attention=attention,
        final_unimodal=xs,
        fusion_inputs=fusion_inputs,
        layout=layout,
        center=stack.center,
        bottleneck=True,
        bottleneck_length=stack.bottleneck_length,
        pre_attention=pre_records,
    )


def vanilla_fusion_forward(inputs, stack: FusionStack) -> FusionOutput:
    xs, pre_records = stack.encode_unimodal(inputs)
    fusion_inputs = dict(xs)
    layout: dict[str, slice] = {}
    start = 0
    for m in stack.modalities:
        length = xs[m].shape[1]
        layout[m] = slice(start, start + length)
        start += length
    h = concat([xs[m] for m in stack.modalities], axis=1)
    attention: dict[tuple[int, str], AttentionRecord] = {}
    for i, layer in enumerate(stack.vanilla):
        h, rec = layer(h, layer=i, modality="all")
        attention[(i, "all")] = rec
    final = {m: h[:, layout[m]] for m in stack.modalities}
    z = final[stack.center]
    return FusionOutput(
        z=z,
        pooled=z.mean(axis=-2),
        attention=attention,
        final_unimodal=final,
        fusion_inputs=fusion_inputs,
        layout=layout,
        center=stack.center,
        bottleneck=False,
        pre_attention=pre_records,
    )
