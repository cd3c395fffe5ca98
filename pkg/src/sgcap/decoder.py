"""Stepwise caption decoder.

One LSTM conditioned on the encoder summary, plus per-path attention at
every step. The visual input of step t is the summary vector plus the
previous step's context vector (zero at the first step); the LSTM input
concatenates the previous token's embedding with that visual vector. The
new hidden state queries each refined feature path through multi-head
attention, each attended result is gated against the hidden state, and
the two gated vectors concatenate into the step's context vector, which
a bias-free linear layer maps to vocabulary logits.

Sequence conventions: rollouts start from BOS (never returned); emitted
tokens include the terminating EOS when one is produced within the
length budget. Scoring accepts rollouts truncated at the budget (no
terminal EOS) and, as a degenerate ending, a final sampled PAD; PAD and
EOS are rejected anywhere else, and PAD is never fed back in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .attention import AoAParams, MultiHeadParams, aoa_block, multi_head_attention
from .autodiff import (
    Tensor,
    add,
    concat,
    constant,
    gather_rows,
    log,
    reshape,
    softmax,
    tanh,
)
from .encoder import EncoderOutput
from .features import BOS, EOS, PAD
from .nn import EmbeddingTable, LinearLayer, LstmParams, LstmState, lstm_step

__all__ = [
    "DecoderParams",
    "DecoderState",
    "StepScore",
    "init_state",
    "decode_step",
    "teacher_forced_logprobs",
    "generate_greedy",
    "sample_sequence",
]


@dataclass
class DecoderParams:
    embedding: EmbeddingTable
    lstm: LstmParams
    init_h: LinearLayer
    init_m: LinearLayer
    spatial_att: MultiHeadParams
    spatial_aoa: AoAParams
    rel_att: MultiHeadParams
    rel_aoa: AoAParams
    out_proj: LinearLayer  # (vocab, 2 * d_model), bias-free
    max_len: int = 20

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        vocab_size: int,
        d_model: int,
        embed_dim: int,
        heads: int,
        max_len: int = 20,
    ):
        return cls(
            EmbeddingTable.init(rng, vocab_size, embed_dim),
            LstmParams.init(rng, embed_dim + 2 * d_model, d_model),
            LinearLayer.init(rng, 2 * d_model, d_model),
            LinearLayer.init(rng, 2 * d_model, d_model),
            MultiHeadParams.init(rng, d_model, heads),
            AoAParams.init(rng, d_model),
            MultiHeadParams.init(rng, d_model, heads),
            AoAParams.init(rng, d_model),
            LinearLayer.init(rng, 2 * d_model, vocab_size, bias=False),
            max_len,
        )

    @property
    def d_model(self) -> int:
        return self.lstm.d_hidden

    @property
    def vocab_size(self) -> int:
        return self.embedding.vocab_size

    def named_params(self, prefix: str = "decoder") -> Iterator[tuple[str, Tensor]]:
        yield from self.embedding.named_params(f"{prefix}.embedding")
        yield from self.lstm.named_params(f"{prefix}.lstm")
        yield from self.init_h.named_params(f"{prefix}.init_h")
        yield from self.init_m.named_params(f"{prefix}.init_m")
        yield from self.spatial_att.named_params(f"{prefix}.spatial_att")
        yield from self.spatial_aoa.named_params(f"{prefix}.spatial_aoa")
        yield from self.rel_att.named_params(f"{prefix}.rel_att")
        yield from self.rel_aoa.named_params(f"{prefix}.rel_aoa")
        yield from self.out_proj.named_params(f"{prefix}.out_proj")


@dataclass
class DecoderState:
    """Carried between steps; decode_step returns a fresh one."""

    lstm: LstmState
    c_prev: Tensor  # previous context vector, (2 * d_model,)
    t: int


@dataclass
class StepScore:
    """Per-step artifacts kept for loss construction and audits."""

    logits: Tensor
    probs: Tensor
    log_prob: Tensor  # scalar: log prob of the realized target
    target: int


def init_state(params: DecoderParams, enc: EncoderOutput) -> DecoderState:
    """h0 and m0 are tanh images of the summary; context starts at zero."""
    h0 = tanh(params.init_h.apply_vec(enc.a_bar))
    m0 = tanh(params.init_m.apply_vec(enc.a_bar))
    return DecoderState(LstmState(h0, m0), constant(np.zeros(2 * params.d_model)), 0)


def _pick(vec: Tensor, index: int) -> Tensor:
    """Scalar element of a vector, differentiable."""
    n = vec.data.shape[0]
    return reshape(gather_rows(reshape(vec, (n, 1)), [index]), ())


def decode_step(
    params: DecoderParams, enc: EncoderOutput, state: DecoderState, token_id: int
) -> tuple[Tensor, Tensor, DecoderState]:
    """One step: feed a token, get (logits, probs, new state)."""
    token_id = int(token_id)
    if token_id == PAD:
        raise ValueError("decode_step fed PAD")
    if not 0 <= token_id < params.vocab_size:
        raise IndexError(f"token id {token_id} outside vocabulary of {params.vocab_size}")
    d = params.d_model
    u = add(enc.a_bar, state.c_prev)
    x = concat([params.embedding.lookup(token_id), u], axis=0)
    lstm_state = lstm_step(params.lstm, state.lstm, x)
    q = reshape(lstm_state.h, (1, d))

    v_spatial = multi_head_attention(
        params.spatial_att, q, enc.refined_spatial, enc.refined_spatial
    )
    o_spatial = aoa_block(params.spatial_aoa, q, v_spatial)
    if enc.rel_mask.any():
        v_rel = multi_head_attention(
            params.rel_att, q, enc.refined_rel, enc.refined_rel, key_mask=enc.rel_mask
        )
    else:
        v_rel = constant(np.zeros((1, d)))
    o_rel = aoa_block(params.rel_aoa, q, v_rel)

    c_t = reshape(concat([o_spatial, o_rel], axis=1), (2 * d,))
    logits = params.out_proj.apply_vec(c_t)
    probs = softmax(logits, axis=-1)
    return logits, probs, DecoderState(lstm_state, c_t, state.t + 1)


def _validate_sequence(tokens, vocab_size: int) -> list[int]:
    tokens = [int(t) for t in tokens]
    if len(tokens) < 2:
        raise ValueError(f"sequence too short to score: {tokens}")
    if tokens[0] != BOS:
        raise ValueError("sequence must start with BOS")
    for pos, t in enumerate(tokens):
        if not 0 <= t < vocab_size:
            raise IndexError(f"token id {t} outside vocabulary of {vocab_size}")
        if t in (EOS, PAD) and pos != len(tokens) - 1:
            raise ValueError(f"terminator token {t} at interior position {pos}")
    return tokens


def teacher_forced_logprobs(
    params: DecoderParams, enc: EncoderOutput, gt_tokens
) -> tuple[Tensor, list[StepScore]]:
    """Sum of log-probs of each next token under forced decoding.

    gt_tokens is BOS, words..., EOS for ground truth; a rollout truncated
    at the length budget (no terminal EOS) is also accepted.
    """
    tokens = _validate_sequence(gt_tokens, params.vocab_size)
    state = init_state(params, enc)
    total: Optional[Tensor] = None
    steps: list[StepScore] = []
    for prev, target in zip(tokens[:-1], tokens[1:]):
        logits, probs, state = decode_step(params, enc, state, prev)
        lp = log(_pick(probs, target))
        steps.append(StepScore(logits, probs, lp, target))
        total = lp if total is None else add(total, lp)
    return total, steps


def generate_greedy(params: DecoderParams, enc: EncoderOutput, max_len: Optional[int] = None) -> list[int]:
    """Argmax rollout; ties resolve to the lowest index.

    Returns emitted tokens (EOS included when emitted), at most max_len.
    """
    budget = params.max_len if max_len is None else int(max_len)
    state = init_state(params, enc)
    out: list[int] = []
    token = BOS
    for _ in range(budget):
        _, probs, state = decode_step(params, enc, state, token)
        token = int(np.argmax(probs.data))
        out.append(token)
        if token in (EOS, PAD):
            break
    return out


def sample_sequence(
    params: DecoderParams,
    enc: EncoderOutput,
    rng: np.random.Generator,
    max_len: Optional[int] = None,
) -> tuple[list[int], Optional[Tensor], list[StepScore]]:
    """Multinomial rollout from each step's distribution.

    Returns (tokens, total log-prob tensor, per-step scores). The stored
    log-probs come from the same forward pass, so re-scoring the returned
    tokens with teacher_forced_logprobs reproduces them exactly.
    """
    budget = params.max_len if max_len is None else int(max_len)
    state = init_state(params, enc)
    out: list[int] = []
    steps: list[StepScore] = []
    total: Optional[Tensor] = None
    token = BOS
    for _ in range(budget):
        logits, probs, state = decode_step(params, enc, state, token)
        choice = int(rng.choice(params.vocab_size, p=probs.data))
        lp = log(_pick(probs, choice))
        steps.append(StepScore(logits, probs, lp, choice))
        total = lp if total is None else add(total, lp)
        out.append(choice)
        token = choice
        if choice in (EOS, PAD):
            break
    return out, total, steps
