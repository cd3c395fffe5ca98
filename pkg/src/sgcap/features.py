"""Data plumbing: vocabulary, word vectors, relationship triplets, datasets.

File formats handled here:

* word vectors: text, one entry per line, ``word v1 ... v300``;
* spatial / relationship feature matrices: binary, little-endian, magic
  ``SGAF``, u32 version (1), u32 rows, u32 cols, then rows*cols float32
  values in row-major order;
* datasets: JSON lines, one image per line with keys ``id``, ``split``
  (train / val / test), ``captions``, ``triplets`` (each with ``s``,
  ``p``, ``o``, ``score``) and ``feature_file`` (path, relative paths
  resolved against the dataset file's directory).

Arrays here are plain numpy (float64 once loaded); they are wrapped into
graph tensors at encode time.
"""

from __future__ import annotations

import json
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nn
from .autodiff import Tensor
from .ioutil import atomic_write_bytes, atomic_write_text

__all__ = [
    "PAD", "BOS", "EOS", "UNK",
    "SPECIALS",
    "WORD_VECTOR_DIM",
    "MAX_TRIPLETS",
    "FileFormatError",
    "tokenize",
    "Vocabulary",
    "build_vocabulary",
    "WordVectorTable",
    "load_word_vectors",
    "write_sgaf",
    "load_sgaf",
    "RelationshipTriplet",
    "select_top_triplets",
    "make_triplet_lstm",
    "embed_triplet",
    "build_relationship_matrix",
    "FeatureBundle",
    "ImageRecord",
    "Dataset",
    "load_dataset",
    "coverage_stats",
]

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
WORD_VECTOR_DIM = 300
MAX_TRIPLETS = 20

_SGAF_MAGIC = b"SGAF"
_SGAF_VERSION = 1

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class FileFormatError(ValueError):
    """A file failed structural validation (bad magic, width, field)."""


def tokenize(text: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Vocabulary:
    """Token <-> id mapping with fixed special ids 0..3.

    Non-special tokens are ordered by corpus count (descending), ties
    broken lexicographically, so the same corpus always yields the same
    mapping.
    """

    def __init__(self, tokens: Sequence[str], min_count: int = 1):
        for i, s in enumerate(SPECIALS):
            if tokens[i] != s:
                raise ValueError(f"token {i} must be {s!r}, got {tokens[i]!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        self.min_count = int(min_count)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def id_to_token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise IndexError(f"token id {token_id} outside vocabulary of {len(self._tokens)}")
        return self._tokens[token_id]

    def encode_caption(self, text: str) -> list[int]:
        """BOS, token ids (UNK for out-of-vocabulary), EOS."""
        return [BOS] + [self.token_to_id(t) for t in tokenize(text)] + [EOS]

    def decode_tokens(self, token_ids: Iterable[int]) -> str:
        """Words joined by spaces; PAD/BOS skipped, EOS terminates."""
        words = []
        for tid in token_ids:
            tid = int(tid)
            if tid == EOS:
                break
            if tid in (PAD, BOS):
                continue
            words.append(self.id_to_token(tid))
        return " ".join(words)

    def save(self, path) -> None:
        atomic_write_text(
            path,
            json.dumps({"min_count": self.min_count, "tokens": self._tokens}, indent=0) + "\n",
        )

    @classmethod
    def load(cls, path) -> "Vocabulary":
        obj = json.loads(Path(path).read_text())
        return cls(obj["tokens"], obj["min_count"])


def build_vocabulary(captions: Iterable[str], min_count: int = 5) -> Vocabulary:
    """Count tokens over the corpus; keep those seen at least min_count times."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: dict[str, int] = {}
    for text in captions:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(list(SPECIALS) + kept, min_count)


class WordVectorTable:
    """word -> fixed 300-d vector; unknown words map to the zero vector."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        for w, v in vectors.items():
            if v.shape != (WORD_VECTOR_DIM,):
                raise FileFormatError(
                    f"vector for {w!r} has length {v.shape[0]}, expected {WORD_VECTOR_DIM}"
                )
        self._vectors = {w: np.asarray(v, dtype=np.float64) for w, v in vectors.items()}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, word: str) -> bool:
        return word in self._vectors

    def get(self, word: str) -> np.ndarray:
        """Vector for the word; zeros when out of table."""
        v = self._vectors.get(word)
        return v.copy() if v is not None else np.zeros(WORD_VECTOR_DIM)


def load_word_vectors(path) -> WordVectorTable:
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != WORD_VECTOR_DIM + 1:
                raise FileFormatError(
                    f"{path}:{lineno}: expected word + {WORD_VECTOR_DIM} values, got {len(parts)} fields"
                )
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            vectors[parts[0]] = vec
    return WordVectorTable(vectors)


def write_sgaf(path, matrix: np.ndarray) -> None:
    """Write a matrix in the binary feature format (float32 payload)."""
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise FileFormatError(f"feature matrix must be 2-d, got shape {tuple(m.shape)}")
    header = _SGAF_MAGIC + struct.pack("<III", _SGAF_VERSION, m.shape[0], m.shape[1])
    atomic_write_bytes(path, header + np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_sgaf(path) -> np.ndarray:
    """Read a binary feature matrix, widened to float64."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != _SGAF_MAGIC:
        raise FileFormatError(f"{path}: bad magic (not a feature matrix file)")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != _SGAF_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    expected = 16 + rows * cols * 4
    if len(raw) != expected:
        raise FileFormatError(f"{path}: payload size {len(raw) - 16} != {rows}x{cols} float32")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols)
    return data.astype(np.float64)


@dataclass(frozen=True)
class RelationshipTriplet:
    """One detected relationship: subject, predicate, object, confidence."""

    subject: str
    predicate: str
    object_: str
    score: float

    def words(self) -> tuple[str, str, str]:
        return (self.subject, self.predicate, self.object_)


def select_top_triplets(
    triplets: Sequence[RelationshipTriplet], k: int = MAX_TRIPLETS
) -> list[RelationshipTriplet]:
    """k highest-confidence triplets, descending; ties keep input order."""
    order = sorted(range(len(triplets)), key=lambda i: (-triplets[i].score, i))
    return [triplets[i] for i in order[:k]]


def make_triplet_lstm(seed: int = 0) -> nn.LstmParams:
    """Fixed, seeded 300-d LSTM used by the ``lstm`` aggregation mode.

    Features are extracted before training, so this aggregator is never
    trained; a deterministic seed keeps extraction reproducible.
    """
    return nn.LstmParams.init(np.random.default_rng(seed), WORD_VECTOR_DIM, WORD_VECTOR_DIM)


def embed_triplet(
    triplet: RelationshipTriplet,
    table: WordVectorTable,
    mode: str = "mean",
    lstm_params: Optional[nn.LstmParams] = None,
) -> np.ndarray:
    """300-d vector for one triplet.

    mean: (v_s + v_p + v_o) / 3.  lstm: final hidden state of a 300-d
    LSTM run over the three word vectors in subject, predicate, object
    order. Out-of-table words contribute the zero vector.
    """
    vs = [table.get(w) for w in triplet.words()]
    if mode == "mean":
        return (vs[0] + vs[1] + vs[2]) / 3.0
    if mode == "lstm":
        params = lstm_params if lstm_params is not None else make_triplet_lstm()
        state = params.zero_state()
        for v in vs:
            state = nn.lstm_step(params, state, Tensor(v))
        return state.h.data.copy()
    raise ValueError(f"unknown triplet aggregation mode {mode!r}")


def build_relationship_matrix(
    triplets: Sequence[RelationshipTriplet],
    table: WordVectorTable,
    k: int = MAX_TRIPLETS,
    mode: str = "mean",
    lstm_params: Optional[nn.LstmParams] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(k, 300) matrix plus a row-validity mask.

    Rows hold the top-k triplet embeddings in confidence order; missing
    rows are zero with mask False.
    """
    chosen = select_top_triplets(triplets, k)
    matrix = np.zeros((k, WORD_VECTOR_DIM))
    mask = np.zeros(k, dtype=bool)
    for i, t in enumerate(chosen):
        matrix[i] = embed_triplet(t, table, mode, lstm_params)
        mask[i] = True
    return matrix, mask


@dataclass
class FeatureBundle:
    """Everything the encoder needs for one image."""

    image_id: str
    spatial: np.ndarray        # (N_s, D_s)
    relationships: np.ndarray  # (MAX_TRIPLETS, 300)
    rel_mask: np.ndarray       # (MAX_TRIPLETS,) bool

    def __post_init__(self):
        self.spatial = np.asarray(self.spatial, dtype=np.float64)
        self.relationships = np.asarray(self.relationships, dtype=np.float64)
        self.rel_mask = np.asarray(self.rel_mask, dtype=bool)
        if self.spatial.ndim != 2:
            raise ValueError(f"spatial features must be 2-d, got shape {self.spatial.shape}")
        if self.relationships.shape != (MAX_TRIPLETS, WORD_VECTOR_DIM):
            raise ValueError(
                f"relationship matrix must be ({MAX_TRIPLETS}, {WORD_VECTOR_DIM}), "
                f"got {self.relationships.shape}"
            )
        if self.rel_mask.shape != (MAX_TRIPLETS,):
            raise ValueError(f"relationship mask must have length {MAX_TRIPLETS}")


@dataclass
class ImageRecord:
    image_id: str
    split: str
    captions: list[str]
    triplets: list[RelationshipTriplet]
    feature_file: Path


@dataclass
class Dataset:
    records: list[ImageRecord] = field(default_factory=list)

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def __len__(self) -> int:
        return len(self.records)


_VALID_SPLITS = ("train", "val", "test")


def load_dataset(path) -> Dataset:
    """Parse a JSON-lines dataset; feature paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            for key in ("id", "split", "captions", "triplets", "feature_file"):
                if key not in obj:
                    raise FileFormatError(f"{path}:{lineno}: missing key {key!r}")
            if obj["split"] not in _VALID_SPLITS:
                raise FileFormatError(f"{path}:{lineno}: split must be one of {_VALID_SPLITS}")
            triplets = [
                RelationshipTriplet(t["s"], t["p"], t["o"], float(t["score"]))
                for t in obj["triplets"]
            ]
            feature_file = Path(obj["feature_file"])
            if not feature_file.is_absolute():
                feature_file = base / feature_file
            records.append(
                ImageRecord(str(obj["id"]), obj["split"], list(obj["captions"]), triplets, feature_file)
            )
    return Dataset(records)


def load_bundle(
    record: ImageRecord,
    table: WordVectorTable,
    mode: str = "mean",
    lstm_params: Optional[nn.LstmParams] = None,
) -> FeatureBundle:
    """Assemble one image's features from disk plus its triplets."""
    spatial = load_sgaf(record.feature_file)
    rel, mask = build_relationship_matrix(record.triplets, table, MAX_TRIPLETS, mode, lstm_params)
    return FeatureBundle(record.image_id, spatial, rel, mask)


def coverage_stats(dataset: Dataset) -> dict:
    """How often triplet words actually occur in their image's captions.

    Per split: ``total`` counts every (triplet, slot) word instance,
    ``covered`` those whose word appears among the image's caption
    tokens, ``rate`` their ratio (0 when the split has no triplet words).
    """
    out = {}
    for split in _VALID_SPLITS:
        total = 0
        covered = 0
        for rec in dataset.records:
            if rec.split != split:
                continue
            caption_tokens = set()
            for c in rec.captions:
                caption_tokens.update(tokenize(c))
            for t in rec.triplets:
                for w in t.words():
                    total += 1
                    if w.lower() in caption_tokens:
                        covered += 1
        out[split] = {
            "total": total,
            "covered": covered,
            "rate": (covered / total) if total else 0.0,
        }
    return out
