"""Masked multi-head attention, pre-norm encoder layers and modality projections."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dbf.autodiff import Tensor, layer_norm, matmul, softmax_masked
from dbf.errors import ContractError, ShapeError
from dbf.nn import MLP, Linear, Module, parameter


@dataclass
class AttentionRecord:
    """Post-softmax attention probabilities of one encoder pass.

    ``weights`` has shape (batch, heads, L_q, L_k); a single-sample pass keeps
    a leading batch axis of size 1.
    """

    weights: np.ndarray
    layer: int
    modality: str

    def sample(self, i: int) -> np.ndarray:
        return self.weights[i]


class ModalityProjection(Module):
    """Linear map from raw features of width ``d_in`` to ``d`` plus a learned position table."""

    def __init__(self, d_in: int, d: int, max_len: int, rng: np.random.Generator):
        self.d_in = d_in
        self.max_len = max_len
        self.proj = Linear(d_in, d, rng)
        self.pos = parameter(rng.normal(0.0, 0.02, size=(max_len, d)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"expected feature width {self.d_in}, got {x.shape[-1]}")
        length = x.shape[-2]
        if length > self.max_len:
            raise ContractError(
                f"input too long: {length} positions exceed the configured maximum {self.max_len}"
            )
        return self.proj(x) + self.pos[:length]


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ContractError(f"model width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.wq = Linear(d, d, rng)
        # A key bias adds the same constant to every score in a query row,
        # which the softmax cancels, so it would be a parameter with no effect.
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        return x.reshape(b, length, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask=None,
                 layer: int = 0, modality: str = "") -> tuple[Tensor, AttentionRecord]:
        squeeze = q_in.ndim == 2
        if squeeze:
            q_in = q_in.reshape(1, *q_in.shape)
            kv_in = kv_in.reshape(1, *kv_in.shape)
        b, lq, d = q_in.shape
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(kv_in))
        v = self._split(self.wv(kv_in))
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.n_heads))
        attn = softmax_masked(scores, mask)
        ctx = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        out = self.wo(ctx)
        if squeeze:
            out = out.reshape(lq, d)
        return out, AttentionRecord(attn.data, layer, modality)


class EncoderLayer(Module):
    """Pre-norm block: x + Attn(LN(x)), then + FFN(LN(.)) with a GELU feed-forward."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.ln1_gain = parameter(np.ones(d))
        self.ln1_bias = parameter(np.zeros(d))
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2_gain = parameter(np.ones(d))
        self.ln2_bias = parameter(np.zeros(d))
        self.ffn = MLP(d, 4 * d, d, rng)

    def zero_output_projections(self) -> None:
        for lin in (self.attn.wo, self.ffn.fc2):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0

    def __call__(self, x: Tensor, mask=None, layer: int = 0,
                 modality: str = "") -> tuple[Tensor, AttentionRecord]:
        h = layer_norm(x, self.ln1_gain, self.ln1_bias)
        a, record = self.attn(h, h, mask, layer=layer, modality=modality)
        x = x + a
        x = x + self.ffn(layer_norm(x, self.ln2_gain, self.ln2_bias))
        return x, record
