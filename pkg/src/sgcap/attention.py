"""Attention blocks: scaled dot-product, multi-head, and gated refinement.

The gated refinement block (attention on attention) combines a query and
an attended vector into an information vector and a sigmoid gate, and
returns their elementwise product. Multi-head attention projects queries,
keys and values once, splits the projections into contiguous column
blocks (one per head), runs scaled dot-product attention per head with
the per-head width, and concatenates the heads. There is no output
projection.

Masked keys receive an additive -1e9 on their logits; after the softmax
max-subtraction the exponential underflows to exactly 0.0 in float64, so
a masked row cannot influence the output bit-wise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    concat,
    constant,
    matmul,
    mul,
    scale,
    sigmoid,
    slice_cols,
    softmax,
    tile_rows,
    transpose,
)
from .nn import init_weight

__all__ = [
    "MASK_LOGIT",
    "scaled_dot_attention",
    "MultiHeadParams",
    "multi_head_attention",
    "AoAParams",
    "aoa_block",
]

MASK_LOGIT = -1e9


def _check_mask(key_mask, n_keys: int) -> Optional[np.ndarray]:
    if key_mask is None:
        return None
    mask = np.asarray(key_mask, dtype=bool).reshape(-1)
    if mask.shape != (n_keys,):
        raise DimensionError(f"key mask length {mask.shape[0]} != number of keys {n_keys}")
    if not mask.any():
        raise ValueError("attention with every key masked")
    return mask


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v, softmax taken row-wise over keys."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("scaled_dot_attention expects matrices")
    n_k, d = k.data.shape
    if q.data.shape[1] != d:
        raise DimensionError(f"query width {q.data.shape[1]} != key width {d}")
    if v.data.shape[0] != n_k:
        raise DimensionError(f"value rows {v.data.shape[0]} != key rows {n_k}")
    mask = _check_mask(key_mask, n_k)
    logits = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d))
    if mask is not None:
        bias = np.where(mask, 0.0, MASK_LOGIT)
        logits = add(logits, constant(np.tile(bias, (q.data.shape[0], 1))))
    weights = softmax(logits, axis=-1)
    return matmul(weights, v)


@dataclass
class MultiHeadParams:
    """Shared projections plus the head count; head width is d / heads."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int):
        if d_model % heads != 0:
            raise DimensionError(f"heads {heads} must divide d_model {d_model}")
        return cls(
            init_weight(rng, d_model, d_model),
            init_weight(rng, d_model, d_model),
            init_weight(rng, d_model, d_model),
            heads,
        )

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v


def multi_head_attention(
    params: MultiHeadParams, q_in: Tensor, k_in: Tensor, v_in: Tensor, key_mask=None
) -> Tensor:
    """Project, split into contiguous per-head column blocks, attend, concat."""
    d = params.d_model
    h = params.heads
    if d % h != 0:
        raise DimensionError(f"heads {h} must divide width {d}")
    for name, t in (("query", q_in), ("key", k_in), ("value", v_in)):
        if t.data.ndim != 2 or t.data.shape[1] != d:
            raise DimensionError(f"{name} must be (n, {d}), got {tuple(t.data.shape)}")
    q = matmul(q_in, transpose(params.w_q))
    k = matmul(k_in, transpose(params.w_k))
    v = matmul(v_in, transpose(params.w_v))
    dh = d // h
    heads = []
    for i in range(h):
        lo, hi = i * dh, (i + 1) * dh
        heads.append(
            scaled_dot_attention(
                slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi), key_mask
            )
        )
    return heads[0] if h == 1 else concat(heads, axis=1)


@dataclass
class AoAParams:
    """Information and gate projections of the gated refinement block."""

    w_q_info: Tensor
    w_v_info: Tensor
    b_info: Tensor
    w_q_gate: Tensor
    w_v_gate: Tensor
    b_gate: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int):
        from .autodiff import parameter

        return cls(
            init_weight(rng, d_model, d_model),
            init_weight(rng, d_model, d_model),
            parameter(np.zeros(d_model)),
            init_weight(rng, d_model, d_model),
            init_weight(rng, d_model, d_model),
            parameter(np.zeros(d_model)),
        )

    @property
    def d_model(self) -> int:
        return self.w_q_info.shape[0]

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("w_q_info", "w_v_info", "b_info", "w_q_gate", "w_v_gate", "b_gate"):
            yield f"{prefix}.{name}", getattr(self, name)


def aoa_block(params: AoAParams, q: Tensor, v_hat: Tensor) -> Tensor:
    """Gate an information vector with a sigmoid of the same inputs.

    info = q W_qi^T + v_hat W_vi^T + b_i
    gate = sigmoid(q W_qg^T + v_hat W_vg^T + b_g)
    out  = gate * info        (elementwise, row by row)
    """
    d = params.d_model
    if q.data.ndim != 2 or q.data.shape[1] != d:
        raise DimensionError(f"query must be (n, {d}), got {tuple(q.data.shape)}")
    if v_hat.data.shape != q.data.shape:
        raise DimensionError(
            f"attended input {tuple(v_hat.data.shape)} must match query {tuple(q.data.shape)}"
        )
    n = q.data.shape[0]
    info = add(
        add(matmul(q, transpose(params.w_q_info)), matmul(v_hat, transpose(params.w_v_info))),
        tile_rows(params.b_info, n),
    )
    gate = sigmoid(
        add(
            add(matmul(q, transpose(params.w_q_gate)), matmul(v_hat, transpose(params.w_v_gate))),
            tile_rows(params.b_gate, n),
        )
    )
    return mul(gate, info)
