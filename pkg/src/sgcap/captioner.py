"""The full captioning model: configuration plus both parameter sets."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .decoder import DecoderParams
from .encoder import EncoderParams
from .features import WORD_VECTOR_DIM

__all__ = ["CaptionerConfig", "CaptionerParams"]


@dataclass
class CaptionerConfig:
    vocab_size: int
    d_model: int = 512
    embed_dim: int = 512
    heads: int = 8
    spatial_dim: int = 2048
    max_len: int = 20
    triplet_mode: str = "mean"  # how relationship rows were aggregated

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide d_model {self.d_model}")
        if self.vocab_size < 5:
            raise ValueError("vocabulary must contain the specials plus at least one word")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "CaptionerConfig":
        return cls(**obj)


@dataclass
class CaptionerParams:
    config: CaptionerConfig
    encoder: EncoderParams
    decoder: DecoderParams

    @classmethod
    def init(cls, config: CaptionerConfig, rng: np.random.Generator) -> "CaptionerParams":
        encoder = EncoderParams.init(
            rng, config.spatial_dim, WORD_VECTOR_DIM, config.d_model, config.heads
        )
        decoder = DecoderParams.init(
            rng, config.vocab_size, config.d_model, config.embed_dim, config.heads, config.max_len
        )
        return cls(config, encoder, decoder)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named_params("encoder")
        yield from self.decoder.named_params("decoder")

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Name -> owned copy of the current values, in manifest order."""
        return {name: t.data.copy() for name, t in self.named_params()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place from a name -> array map."""
        mine = dict(self.named_params())
        missing = set(mine) - set(arrays)
        extra = set(arrays) - set(mine)
        if missing or extra:
            raise ValueError(f"parameter manifest mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in mine.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {t.data.shape}")
            t.data[...] = arr
