"""Two-phase training: cross-entropy warm-up, then self-critical fine-tuning.

Phase 1 minimizes the summed negative log-likelihood of ground-truth
captions. Phase 2 samples a caption per image, uses the greedy decode of
the same model as the reward baseline, and descends
-(r_sampled - r_greedy) * sum(log p) so tokens that beat the baseline get
more probable. The reward blends a language score (consensus metric over
references) with the frozen embedding-space cosine.

Both phases shuffle with a seeded generator, validate with greedy decodes
scored by the plain consensus metric, keep the best-on-validation
parameters, and stop early after ``patience`` epochs without improvement.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, add, scale
from .captioner import CaptionerParams
from .decoder import generate_greedy, sample_sequence, teacher_forced_logprobs
from .encoder import EncoderOutput, encode
from .features import BOS, EOS, PAD, FeatureBundle, Vocabulary
from .metrics import IdfTable, cider, cider_d
from .vse import VseParams, embed_caption, embed_image, vision_reward

__all__ = [
    "RewardBreakdown",
    "Phase1Config",
    "Phase2Config",
    "TrainConfig",
    "TrainResult",
    "xe_loss",
    "combined_reward",
    "ScstRollout",
    "scst_rollout",
    "scst_step",
    "validation_cider",
    "train_xe",
    "train_scst",
]


@dataclass(frozen=True)
class RewardBreakdown:
    """One caption's reward, split into its two ingredients."""

    r_l: float
    r_v: float
    alpha: float
    r: float


@dataclass
class Phase1Config:
    max_epochs: int = 50
    patience: int = 5
    lr0: float = 5e-4
    decay_every: int = 5
    decay_factor: float = 0.8
    batch: int = 128
    # extra knob: stop once mean train loss drops below this (None = off)
    stop_loss: Optional[float] = None

    def __post_init__(self):
        if min(self.max_epochs, self.patience, self.decay_every, self.batch) < 1:
            raise ValueError("phase-1 epoch/patience/decay/batch settings must be positive")
        if self.lr0 <= 0 or not 0 < self.decay_factor <= 1:
            raise ValueError("phase-1 learning-rate settings out of range")


@dataclass
class Phase2Config:
    epochs: int = 30
    patience: int = 5
    lr: float = 2e-5
    batch: int = 64
    alpha: float = 0.7
    # extra knob: hard cap on optimizer steps across all epochs (None = off)
    max_steps: Optional[int] = None

    def __post_init__(self):
        if min(self.epochs, self.patience, self.batch) < 1:
            raise ValueError("phase-2 epoch/patience/batch settings must be positive")
        if self.lr <= 0:
            raise ValueError("phase-2 learning rate must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class TrainConfig:
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("gradient clip norm must be positive")


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_cider: float
    stop_reason: str


def xe_loss(params: CaptionerParams, enc: EncoderOutput, gt_tokens: Sequence[int]) -> Tensor:
    """Summed negative log-likelihood of one ground-truth sequence."""
    total, _ = teacher_forced_logprobs(params.decoder, enc, gt_tokens)
    return scale(total, -1.0)


def combined_reward(
    caption_ids: Sequence[int],
    bundle: FeatureBundle,
    refs: Sequence[Sequence[str]],
    idf: IdfTable,
    vse: VseParams,
    vocab: Vocabulary,
    alpha: float,
) -> RewardBreakdown:
    """Blend the language and vision rewards for one decoded caption.

    The endpoints are returned verbatim (alpha=1 gives exactly the
    language reward, alpha=0 exactly the vision one), so reward equality
    checks against the individual components hold bitwise.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    # metrics score token lists; decode_tokens joins into a display string
    words = vocab.decode_tokens(caption_ids).split()
    r_l = cider_d(words, refs, idf)
    content = [t for t in caption_ids if t not in (PAD, BOS, EOS)]
    if content:
        w_e = embed_caption(vse, content)
        i_e = embed_image(vse, Tensor(bundle.spatial, requires_grad=False))
        r_v = vision_reward(w_e, i_e)
    else:
        warnings.warn("empty caption: vision reward defined as 0")
        r_v = 0.0
    if alpha == 1.0:
        r = r_l
    elif alpha == 0.0:
        r = r_v
    else:
        r = alpha * r_l + (1.0 - alpha) * r_v
    return RewardBreakdown(r_l=r_l, r_v=r_v, alpha=alpha, r=r)


def _clip_gradients(leaves: Sequence[Tensor], clip_norm: float) -> None:
    total = 0.0
    for t in leaves:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > clip_norm:
        factor = clip_norm / norm
        for t in leaves:
            if t.grad is not None:
                t.grad *= factor


def _sgd_step(leaves: Sequence[Tensor], lr: float) -> None:
    for t in leaves:
        if t.grad is not None:
            t.data -= lr * t.grad


@dataclass
class ScstRollout:
    """One image's sampled-vs-greedy comparison inside an active tape."""

    loss: Tensor
    steps: list
    sampled: list
    greedy: list
    advantage: float
    sampled_reward: float


def scst_rollout(
    params: CaptionerParams,
    bundle: FeatureBundle,
    refs: Sequence[Sequence[str]],
    reward_fn: Callable[[Sequence[int], FeatureBundle, Sequence[Sequence[str]]], float],
    rng: np.random.Generator,
) -> ScstRollout:
    """Sample one caption, score it against the greedy baseline.

    loss = -(r_sampled - r_greedy) * sum(log p(sampled tokens)), so the
    gradient at each step's logits is advantage * (probs - onehot(token)).
    Must run inside a Tape for the loss to be differentiable.
    """
    enc = encode(params.encoder, bundle)
    sampled, total_lp, steps = sample_sequence(params.decoder, enc, rng)
    greedy = generate_greedy(params.decoder, enc)
    r_s = reward_fn(sampled, bundle, refs)
    r_b = reward_fn(greedy, bundle, refs)
    advantage = r_s - r_b
    return ScstRollout(
        loss=scale(total_lp, -advantage),
        steps=steps,
        sampled=sampled,
        greedy=greedy,
        advantage=advantage,
        sampled_reward=r_s,
    )


def scst_step(
    params: CaptionerParams,
    batch: Sequence[tuple[FeatureBundle, Sequence[Sequence[str]]]],
    reward_fn: Callable[[Sequence[int], FeatureBundle, Sequence[Sequence[str]]], float],
    lr: float,
    rng: np.random.Generator,
    clip_norm: float = 5.0,
) -> tuple[float, float]:
    """One self-critical policy-gradient step over a batch of images.

    The batch loss is the mean of the per-image rollout losses. Returns
    the mean advantage and the mean sampled reward.
    """
    if not batch:
        raise ValueError("scst_step needs a non-empty batch")
    leaves = [t for _, t in params.named_params()]
    for t in leaves:
        t.zero_grad()
    with Tape() as tape:
        rollouts = [
            scst_rollout(params, bundle, refs, reward_fn, rng) for bundle, refs in batch
        ]
        loss = rollouts[0].loss
        for extra in rollouts[1:]:
            loss = add(loss, extra.loss)
        loss = scale(loss, 1.0 / len(batch))
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"self-critical loss is not finite: {value!r}")
    tape.backward(loss)
    _clip_gradients(leaves, clip_norm)
    _sgd_step(leaves, lr)
    mean_advantage = float(np.mean([r.advantage for r in rollouts]))
    mean_sampled = float(np.mean([r.sampled_reward for r in rollouts]))
    return mean_advantage, mean_sampled


def validation_cider(
    params: CaptionerParams,
    items: Sequence[tuple[FeatureBundle, Sequence[Sequence[str]]]],
    vocab: Vocabulary,
    idf: IdfTable,
) -> float:
    """Mean consensus score of greedy decodes against reference sets."""
    if not items:
        raise ValueError("validation needs at least one item")
    total = 0.0
    for bundle, refs in items:
        enc = encode(params.encoder, bundle)
        words = vocab.decode_tokens(generate_greedy(params.decoder, enc)).split()
        total += cider(words, refs, idf)
    return total / len(items)


def _append_log(log_path: Optional[Path], record: dict) -> None:
    if log_path is None:
        return
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def _epoch_batches(rng: np.random.Generator, count: int, batch: int) -> list[np.ndarray]:
    order = rng.permutation(count)
    return [order[i:i + batch] for i in range(0, count, batch)]


def train_xe(
    params: CaptionerParams,
    train_pairs: Sequence[tuple[FeatureBundle, Sequence[int]]],
    val_items: Sequence[tuple[FeatureBundle, Sequence[Sequence[str]]]],
    vocab: Vocabulary,
    config: TrainConfig,
    idf: IdfTable,
    log_path: Optional[Path] = None,
) -> TrainResult:
    """Phase 1: minimize caption cross-entropy with a decaying learning rate.

    ``train_pairs`` holds one entry per (image, encoded caption); an image
    with several captions appears several times. Keeps the parameters that
    scored best on validation and restores them before returning.
    """
    if not train_pairs:
        raise ValueError("phase-1 training split is empty")
    if not val_items:
        raise ValueError("phase-1 validation split is empty")
    cfg = config.phase1
    rng = np.random.default_rng(config.seed)
    leaves = [t for _, t in params.named_params()]
    history: list[dict] = []
    best_val = -math.inf
    best_epoch = -1
    best_arrays = params.param_arrays()
    since_best = 0
    stop_reason = "max_epochs"
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)
        epoch_loss = 0.0
        for batch in _epoch_batches(rng, len(train_pairs), cfg.batch):
            for t in leaves:
                t.zero_grad()
            with Tape() as tape:
                parts = []
                for k in batch:
                    bundle, tokens = train_pairs[k]
                    parts.append(xe_loss(params, encode(params.encoder, bundle), tokens))
                loss = parts[0]
                for extra in parts[1:]:
                    loss = add(loss, extra)
                loss = scale(loss, 1.0 / len(batch))
            value = loss.item()
            if not math.isfinite(value):
                params.load_arrays(best_arrays)
                raise FloatingPointError(
                    f"cross-entropy loss diverged at epoch {epoch}; "
                    f"parameters restored to epoch {best_epoch}"
                )
            epoch_loss += value * len(batch)
            tape.backward(loss)
            _clip_gradients(leaves, config.clip_norm)
            _sgd_step(leaves, lr)
        mean_loss = epoch_loss / len(train_pairs)
        val = validation_cider(params, val_items, vocab, idf)
        record = {"epoch": epoch, "loss": mean_loss, "val_cider": val, "lr": lr}
        history.append(record)
        _append_log(log_path, record)
        if val > best_val:
            best_val = val
            best_epoch = epoch
            best_arrays = params.param_arrays()
            since_best = 0
        else:
            since_best += 1
        if cfg.stop_loss is not None and mean_loss < cfg.stop_loss:
            # the point of the threshold is the overfit itself, so the
            # current parameters win over the best-on-validation snapshot
            best_arrays = params.param_arrays()
            best_epoch = epoch
            best_val = val
            stop_reason = "stop_loss"
            break
        if since_best >= cfg.patience:
            stop_reason = "patience"
            break
    params.load_arrays(best_arrays)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_cider=best_val,
        stop_reason=stop_reason,
    )


def train_scst(
    params: CaptionerParams,
    train_items: Sequence[tuple[FeatureBundle, Sequence[Sequence[str]]]],
    val_items: Sequence[tuple[FeatureBundle, Sequence[Sequence[str]]]],
    vocab: Vocabulary,
    config: TrainConfig,
    idf: IdfTable,
    vse: Optional[VseParams] = None,
    reward: str = "mmr",
    log_path: Optional[Path] = None,
) -> TrainResult:
    """Phase 2: self-critical fine-tuning with the blended reward.

    ``reward`` selects the objective: "mmr" blends language and vision
    rewards with the configured alpha and needs the reward network,
    "cider" is the pure language reward and runs without one. The reward
    network and idf table are read, never written.
    """
    if reward not in ("mmr", "cider"):
        raise ValueError(f"unknown reward {reward!r}, expected 'mmr' or 'cider'")
    if reward == "mmr" and vse is None:
        raise ValueError("the mmr reward needs a trained reward network")
    if not train_items:
        raise ValueError("phase-2 training split is empty")
    if not val_items:
        raise ValueError("phase-2 validation split is empty")
    cfg = config.phase2

    if reward == "cider":
        def reward_fn(tokens, bundle, refs):
            return cider_d(vocab.decode_tokens(tokens).split(), refs, idf)
    else:
        def reward_fn(tokens, bundle, refs):
            return combined_reward(tokens, bundle, refs, idf, vse, vocab, cfg.alpha).r

    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    best_val = -math.inf
    best_epoch = -1
    best_arrays = params.param_arrays()
    since_best = 0
    steps_done = 0
    stop_reason = "max_epochs"
    for epoch in range(cfg.epochs):
        epoch_reward = 0.0
        epoch_count = 0
        for batch_idx in _epoch_batches(rng, len(train_items), cfg.batch):
            if cfg.max_steps is not None and steps_done >= cfg.max_steps:
                break
            batch = [train_items[k] for k in batch_idx]
            try:
                _, mean_sampled = scst_step(
                    params, batch, reward_fn, cfg.lr, rng, clip_norm=config.clip_norm
                )
            except FloatingPointError:
                params.load_arrays(best_arrays)
                raise FloatingPointError(
                    f"self-critical loss diverged at epoch {epoch}; "
                    f"parameters restored to epoch {best_epoch}"
                ) from None
            epoch_reward += mean_sampled * len(batch)
            epoch_count += len(batch)
            steps_done += 1
        if epoch_count == 0:
            stop_reason = "max_steps"
            break
        mean_reward = epoch_reward / epoch_count
        val = validation_cider(params, val_items, vocab, idf)
        record = {"epoch": epoch, "mean_reward": mean_reward, "val_cider": val, "lr": cfg.lr}
        history.append(record)
        _append_log(log_path, record)
        if val > best_val:
            best_val = val
            best_epoch = epoch
            best_arrays = params.param_arrays()
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            stop_reason = "patience"
            break
        if cfg.max_steps is not None and steps_done >= cfg.max_steps:
            stop_reason = "max_steps"
            break
    params.load_arrays(best_arrays)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_cider=best_val,
        stop_reason=stop_reason,
    )
