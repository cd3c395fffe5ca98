"""Neural network building blocks on top of the tape engine.

Plain parameter containers plus forward functions. Initialization is
Xavier-uniform (limit sqrt(6 / (fan_in + fan_out))) for weight matrices,
zero for biases, except the LSTM forget-gate bias which starts at 1.0.
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
    gather_rows,
    matmul,
    mul,
    parameter,
    reshape,
    sigmoid,
    tanh,
    tile_rows,
    transpose,
)

__all__ = [
    "xavier_limit",
    "init_weight",
    "LinearLayer",
    "EmbeddingTable",
    "LstmParams",
    "LstmState",
    "lstm_step",
]


def xavier_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_weight(rng: np.random.Generator, fan_out: int, fan_in: int) -> Tensor:
    """(fan_out, fan_in) weight drawn uniform in +-xavier_limit."""
    s = xavier_limit(fan_in, fan_out)
    return parameter(rng.uniform(-s, s, size=(fan_out, fan_in)))


@dataclass
class LinearLayer:
    """y = W x (+ b). Weight is (out, in); bias optional."""

    weight: Tensor
    bias: Optional[Tensor] = None

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        w = init_weight(rng, d_out, d_in)
        b = parameter(np.zeros(d_out)) if bias else None
        return cls(w, b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def apply_vec(self, x: Tensor) -> Tensor:
        """Project a single vector (d_in,) -> (d_out,)."""
        if x.data.shape != (self.d_in,):
            raise DimensionError(f"linear expects shape ({self.d_in},), got {tuple(x.data.shape)}")
        col = reshape(x, (self.d_in, 1))
        y = reshape(matmul(self.weight, col), (self.d_out,))
        if self.bias is not None:
            y = add(y, self.bias)
        return y

    def apply_rows(self, x: Tensor) -> Tensor:
        """Project every row of (n, d_in) -> (n, d_out)."""
        if x.data.ndim != 2 or x.data.shape[1] != self.d_in:
            raise DimensionError(f"linear expects (n, {self.d_in}), got {tuple(x.data.shape)}")
        y = matmul(x, transpose(self.weight))
        if self.bias is not None:
            y = add(y, tile_rows(self.bias, x.data.shape[0]))
        return y

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


@dataclass
class EmbeddingTable:
    """Token id -> row of a trainable (vocab, width) matrix."""

    weight: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, width: int):
        return cls(init_weight(rng, vocab_size, width))

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    def lookup(self, token_id: int) -> Tensor:
        if not 0 <= int(token_id) < self.vocab_size:
            raise IndexError(f"token id {token_id} outside vocabulary of {self.vocab_size}")
        return reshape(gather_rows(self.weight, [int(token_id)]), (self.width,))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight


@dataclass
class LstmState:
    """Hidden and memory vectors of one LSTM."""

    h: Tensor
    m: Tensor


@dataclass
class LstmParams:
    """Standard (non-peephole) LSTM cell: 4 gates over concat(x, h)."""

    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    w_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int):
        def w():
            return init_weight(rng, d_hidden, d_in + d_hidden)

        def b(fill=0.0):
            return parameter(np.full(d_hidden, fill))

        # forget-gate bias starts at 1.0 so early memory is retained
        return cls(w(), w(), w(), w(), b(), b(1.0), b(), b())

    @property
    def d_hidden(self) -> int:
        return self.w_i.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_i.shape[1] - self.w_i.shape[0]

    def zero_state(self) -> LstmState:
        z = np.zeros(self.d_hidden)
        return LstmState(Tensor(z), Tensor(z))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("w_i", "w_f", "w_o", "w_c", "b_i", "b_f", "b_o", "b_c"):
            yield f"{prefix}.{name}", getattr(self, name)


def lstm_step(params: LstmParams, state: LstmState, x: Tensor) -> LstmState:
    """One LSTM transition.

    i = sigma(W_i [x; h] + b_i)      f = sigma(W_f [x; h] + b_f)
    o = sigma(W_o [x; h] + b_o)      c~ = tanh(W_c [x; h] + b_c)
    m' = f * m + i * c~              h' = o * tanh(m')
    """
    if x.data.shape != (params.d_in,):
        raise DimensionError(f"lstm_step expects input ({params.d_in},), got {tuple(x.data.shape)}")
    xh = concat([x, state.h], axis=0)

    def gate(w, b, act):
        col = reshape(xh, (xh.data.shape[0], 1))
        return act(add(reshape(matmul(w, col), (params.d_hidden,)), b))

    i = gate(params.w_i, params.b_i, sigmoid)
    f = gate(params.w_f, params.b_f, sigmoid)
    o = gate(params.w_o, params.b_o, sigmoid)
    c_tilde = gate(params.w_c, params.b_c, tanh)
    m_new = add(mul(f, state.m), mul(i, c_tilde))
    h_new = mul(o, tanh(m_new))
    return LstmState(h_new, m_new)
