"""Sparse attention over router-selected positions plus the prediction head.

Queries live at every position; keys and values are read only from the
selected positions. Selection is applied by gathering key/value rows, so
unselected positions get exactly zero attention weight by construction.
With the full position set selected the computation is bit-identical to an
unrestricted transformer layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnLayerParams, _attended, init_attn_params
from .errors import ContractError
from .tensor import Tensor, linear, gather_rows

MASK_VALUE = -1e9


@dataclass
class CouncilParams:
    attn: AttnLayerParams
    head_w: Tensor  # (d, value vocab)
    head_b: Tensor  # (value vocab,)

    def tensors(self) -> list[Tensor]:
        return self.attn.tensors() + [self.head_w, self.head_b]

    @property
    def value_vocab(self) -> int:
        return self.head_w.shape[1]


def init_council_params(d: int, heads: int, value_vocab: int,
                        rng: np.random.Generator, dtype=np.float32) -> CouncilParams:
    return CouncilParams(
        attn=init_attn_params(d, heads, rng, dtype),
        head_w=Tensor(rng.normal(0.0, 0.02, (d, value_vocab)).astype(dtype),
                      requires_grad=True),
        head_b=Tensor(np.zeros(value_vocab, dtype=dtype), requires_grad=True),
    )


def sparse_attention(x: Tensor, selected, params: CouncilParams,
                     return_weights: bool = False):
    """Attend every position to the selected key/value positions only,
    then apply the residual feed-forward, exactly as a full layer would.

    `selected` is an iterable of positions for a single (L, d) input.
    Returns the output, or (output, full (H, L, L) weight matrix) when
    `return_weights` is set; weights outside the selection are exact zeros.
    """
    sel = np.asarray(sorted(set(int(s) for s in selected)), dtype=np.int64)
    if sel.size == 0:
        raise ContractError("sparse attention needs a nonempty selection")
    L = x.shape[-2]
    if sel.min() < 0 or sel.max() >= L:
        raise ContractError("selected position out of range")
    out, weights = _attended(x, params.attn, kv_select=sel)
    if not return_weights:
        return out
    w = weights.data  # (..., H, L, S)
    full = np.zeros(w.shape[:-1] + (L,), dtype=w.dtype)
    full[..., sel] = w
    return out, full


def sparse_attention_batch(x: Tensor, selected: np.ndarray, params: CouncilParams,
                           pad_mask: np.ndarray | None = None) -> Tensor:
    """Batched variant: `selected` is (B, S) with per-sequence positions,
    padded to a common width; `pad_mask` is an additive (B, S) array with
    MASK_VALUE on padding slots so they receive zero weight."""
    out, _ = _attended(x, params.attn, kv_select=selected, key_mask=pad_mask)
    return out


def predict_value(y: Tensor, q, params: CouncilParams) -> Tensor:
    """Linear value-vocabulary logits read from the query position's row."""
    if y.data.ndim == 2:
        L = y.shape[0]
        if not 0 <= int(q) < L:
            raise ContractError(f"query position {q} out of range")
        from .tensor import narrow, reshape
        row = reshape(narrow(y, 0, int(q), 1), (y.shape[-1],))
        return linear(row, params.head_w, params.head_b)
    rows = gather_rows(y, np.asarray(q))
    return linear(rows, params.head_w, params.head_b)


__all__ = ["CouncilParams", "init_council_params", "sparse_attention",
           "sparse_attention_batch", "predict_value"]
