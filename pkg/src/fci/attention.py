"""Softmax-attention preprocessing layers and the kernel-feature
(linear-attention) baseline.

Preprocessing layers are non-causal by default: the router downstream has to
see matches in both directions. All layer entry points accept (L, d) or
batched (B, L, d) inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor, add, clamp_min, div, elu1p, linear, matmul, mul, narrow, reshape,
    rms_norm, scale, silu, softmax_rows, transpose, tsum,
)

log = logging.getLogger(__name__)

MASK_VALUE = -1e9  # additive mask; finite, but underflows to exactly 0 after softmax


@dataclass
class AttnLayerParams:
    """One pre-norm attention layer: multi-head projections, output
    projection, a SiLU feed-forward (d -> 4d -> d), and two norm
    scale/shift pairs."""

    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads:
            raise ConfigError(f"model dim {d} not divisible by {self.heads} heads")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.ffn_w1, self.ffn_b1,
                self.ffn_w2, self.ffn_b2, self.norm1_gain, self.norm1_bias,
                self.norm2_gain, self.norm2_bias]


@dataclass
class PosEmbedding:
    """Learned position table; lookups past the table length are an error."""

    table: Tensor  # (max_len, d)

    def rows(self, length: int) -> Tensor:
        if length > self.table.shape[0]:
            raise IndexError(f"position {length - 1} exceeds table length {self.table.shape[0]}")
        return narrow(self.table, 0, 0, length)

    def tensors(self) -> list[Tensor]:
        return [self.table]


def init_attn_params(d: int, heads: int, rng: np.random.Generator,
                     dtype=np.float32) -> AttnLayerParams:
    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, shape).astype(dtype), requires_grad=True)

    def const(val, *shape):
        return Tensor(np.full(shape, val, dtype=dtype), requires_grad=True)

    return AttnLayerParams(
        heads=heads,
        w_q=w(d, d), w_k=w(d, d), w_v=w(d, d), w_o=w(d, d),
        ffn_w1=w(d, 4 * d), ffn_b1=const(0.0, 4 * d),
        ffn_w2=w(4 * d, d), ffn_b2=const(0.0, d),
        norm1_gain=const(1.0, d), norm1_bias=const(0.0, d),
        norm2_gain=const(1.0, d), norm2_bias=const(0.0, d),
    )


def init_pos_embedding(max_len: int, d: int, rng: np.random.Generator,
                       dtype=np.float32) -> PosEmbedding:
    return PosEmbedding(Tensor(rng.normal(0.0, 0.02, (max_len, d)).astype(dtype),
                               requires_grad=True))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, d) -> (..., H, L, d/H)"""
    *lead, L, d = x.shape
    x = reshape(x, (*lead, L, heads, d // heads))
    order = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(x, order)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., H, L, dh) -> (..., L, H*dh)"""
    *lead, H, L, dh = x.shape
    order = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return reshape(transpose(x, order), (*lead, L, H * dh))


def mha_forward(x: Tensor, params: AttnLayerParams, causal: bool = False,
                kv: Tensor | None = None, key_mask: np.ndarray | None = None
                ) -> tuple[Tensor, Tensor]:
    """Multi-head softmax attention.

    `kv`, when given, is the key/value source (restricted attention reads
    keys from a gathered subset). `key_mask` is an additive (..., Lk)
    array broadcast over heads and query positions. Returns the projected
    output and the per-head attention weights.
    """
    src = x if kv is None else kv
    H = params.heads
    dh = params.d_model // H
    q = _split_heads(matmul(x, params.w_q), H)
    k = _split_heads(matmul(src, params.w_k), H)
    v = _split_heads(matmul(src, params.w_v), H)
    scores = scale(matmul(q, transpose(k, _swap_last(k))), 1.0 / np.sqrt(dh))
    if causal:
        L, Lk = scores.shape[-2], scores.shape[-1]
        tri = np.triu(np.full((L, Lk), MASK_VALUE, dtype=scores.dtype), k=1)
        scores = add(scores, Tensor(tri))
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=scores.dtype)
        mask = mask.reshape(mask.shape[:-1] + (1, 1, mask.shape[-1]))
        scores = add(scores, Tensor(mask))
    weights = softmax_rows(scores)
    y = _merge_heads(matmul(weights, v))
    return matmul(y, params.w_o), weights


def _swap_last(t: Tensor) -> tuple[int, ...]:
    nd = t.data.ndim
    order = list(range(nd))
    order[-1], order[-2] = order[-2], order[-1]
    return tuple(order)


def _ffn(x: Tensor, params: AttnLayerParams) -> Tensor:
    return linear(silu(linear(x, params.ffn_w1, params.ffn_b1)),
                  params.ffn_w2, params.ffn_b2)


def transformer_layer(x: Tensor, params: AttnLayerParams, causal: bool = False,
                      kv_select: np.ndarray | None = None,
                      key_mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm residual layer: x + MHA(norm(x)), then + FFN(norm(.))."""
    y, _ = _attended(x, params, causal=causal, kv_select=kv_select, key_mask=key_mask)
    return y


def _attended(x: Tensor, params: AttnLayerParams, causal: bool = False,
              kv_select: np.ndarray | None = None,
              key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    normed = rms_norm(x, params.norm1_gain, params.norm1_bias)
    kv = None
    if kv_select is not None:
        kv = _gather_positions(normed, kv_select)
    attn, weights = mha_forward(normed, params, causal=causal, kv=kv, key_mask=key_mask)
    h = add(x, attn)
    out = add(h, _ffn(rms_norm(h, params.norm2_gain, params.norm2_bias), params))
    return out, weights


def _gather_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """Gather rows at `positions` ((S,) shared or (B, S) per sequence)."""
    from .tensor import _accum, _make

    pos = np.asarray(positions)
    if x.data.ndim == 2:
        data = x.data[pos]
        idx = (pos,)
    elif pos.ndim == 1:
        data = x.data[:, pos]
        idx = (slice(None), pos)
    else:
        rows = np.arange(x.shape[0])[:, None]
        data = x.data[rows, pos]
        idx = (rows, pos)
    out = _make(np.ascontiguousarray(data), (x,), "gather_pos")
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            _accum(x, full)
        out._backward = bwd
    return out


def linear_attention(x: Tensor, params: AttnLayerParams) -> Tensor:
    """Kernel-feature attention: y_i = phi(q_i)^T (sum_j phi(k_j) v_j^T)
    normalized by phi(q_i)^T sum_j phi(k_j), phi(u) = elu(u) + 1.

    Computed per head via running sums in O(L d^2); denominators below
    1e-6 are clamped and counted in the run log.
    """
    H = params.heads
    phi_q = elu1p(_split_heads(matmul(x, params.w_q), H))
    phi_k = elu1p(_split_heads(matmul(x, params.w_k), H))
    v = _split_heads(matmul(x, params.w_v), H)
    s = matmul(transpose(phi_k, _swap_last(phi_k)), v)       # (..., dh, dh)
    num = matmul(phi_q, s)                                    # (..., L, dh)
    z = tsum(phi_k, axis=-2, keepdims=True)                   # (..., 1, dh)
    den = tsum(mul(phi_q, z), axis=-1, keepdims=True)         # (..., L, 1)
    n_clamped = int((den.data < 1e-6).sum())
    if n_clamped:
        log.warning("linear_attention clamped %d denominators below 1e-6", n_clamped)
    y = div(num, clamp_min(den, 1e-6))
    return matmul(_merge_heads(y), params.w_o)


def linear_attention_layer(x: Tensor, params: AttnLayerParams) -> Tensor:
    """Pre-norm residual layer with the kernel-feature mixer in place of
    softmax attention."""
    h = add(x, linear_attention(rms_norm(x, params.norm1_gain, params.norm1_bias), params))
    return add(h, _ffn(rms_norm(h, params.norm2_gain, params.norm2_bias), params))


__all__ = [
    "AttnLayerParams", "PosEmbedding", "init_attn_params", "init_pos_embedding",
    "mha_forward", "transformer_layer", "linear_attention",
    "linear_attention_layer", "MASK_VALUE",
]
