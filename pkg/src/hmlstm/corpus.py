"""Character corpora: vocabulary, contiguous splits and stateful batch lanes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError, UsageError

UNKNOWN_CHAR = "�"


@dataclass(frozen=True)
class Vocab:
    """Characters in ascending code-point order; index ``len(chars)`` is unknown."""

    chars: tuple[str, ...]

    @classmethod
    def build(cls, text: str) -> "Vocab":
        return cls(tuple(sorted(set(text))))

    @property
    def unknown(self) -> int:
        return len(self.chars)

    @property
    def size(self) -> int:
        return len(self.chars) + 1

    def __len__(self) -> int:
        return self.size

    def encode(self, text: str) -> np.ndarray:
        table = {ch: k for k, ch in enumerate(self.chars)}
        unk = self.unknown
        return np.fromiter((table.get(ch, unk) for ch in text), dtype=np.int64, count=len(text))

    def decode(self, symbols) -> str:
        return "".join(self.chars[s] if s < len(self.chars) else UNKNOWN_CHAR for s in map(int, symbols))


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab: Vocab


def split_lengths(n: int, spec: Sequence[float]) -> tuple[int, int, int]:
    """Resolve fractions (summing to 1) or explicit character counts to lengths."""
    spec = list(spec)
    if len(spec) == 2:
        spec.append(None)
    if len(spec) != 3:
        raise IngestionError("split spec needs train, valid and (optionally) test parts")
    if all(isinstance(v, (int, np.integer)) or v is None for v in spec) and spec[0] is not None and spec[0] > 1:
        a, b = int(spec[0]), int(spec[1])
        c = n - a - b if spec[2] is None else int(spec[2])
        if a + b + c != n:
            raise IngestionError(f"split counts {a}+{b}+{c} do not sum to the corpus length {n}")
    else:
        fr = [float(v) for v in spec if v is not None]
        if len(fr) == 3 and abs(sum(fr) - 1.0) > 1e-9:
            raise IngestionError(f"split fractions {fr} do not sum to 1")
        a = int(round(fr[0] * n))
        b = int(round(fr[1] * n))
        c = n - a - b
    if min(a, b, c) <= 0:
        raise IngestionError(f"empty split in ({a}, {b}, {c}) for a corpus of {n} characters")
    return a, b, c


def split_text(text: str, spec: Sequence[float] = (0.9, 0.05, 0.05)) -> Splits:
    a, b, _ = split_lengths(len(text), spec)
    train, valid, test = text[:a], text[a:a + b], text[a + b:]
    vocab = Vocab.build(train)
    return Splits(vocab.encode(train), vocab.encode(valid), vocab.encode(test), vocab)


def read_corpus(path, encoding: str = "utf-8") -> str:
    try:
        text = Path(path).read_text(encoding=encoding)
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read corpus {path}: {exc}") from exc
    if not text:
        raise IngestionError(f"corpus {path} is empty")
    return text


def load_and_split(path, spec: Sequence[float] = (0.9, 0.05, 0.05), encoding: str = "utf-8") -> Splits:
    return split_text(read_corpus(path, encoding), spec)


@dataclass(frozen=True)
class BatchPlan:
    """``B`` equal-length contiguous lanes cut into overlapping windows.

    Window ``k`` of a lane covers positions ``k*T .. k*T+T``: ``T`` inputs and
    their ``T`` next-symbol targets.  Its last target is the first input of
    window ``k+1``, so carried state lines up exactly across windows.
    """

    lanes: np.ndarray  # (B, lane_length)
    window: int

    @property
    def batch(self) -> int:
        return self.lanes.shape[0]

    @property
    def num_windows(self) -> int:
        return (self.lanes.shape[1] - 1) // self.window

    def __len__(self) -> int:
        return self.num_windows

    def window_at(self, k: int) -> np.ndarray:
        if not 0 <= k < self.num_windows:
            raise IndexError(k)
        T = self.window
        return self.lanes[:, k * T:k * T + T + 1]

    def __iter__(self):
        return (self.window_at(k) for k in range(self.num_windows))

    def covered(self) -> np.ndarray:
        """The part of each lane that some window reads."""
        return self.lanes[:, :self.num_windows * self.window + 1]

    def reconstruct(self) -> np.ndarray:
        """Concatenate each lane's windows, dropping the one-symbol overlaps."""
        rows = []
        for b in range(self.batch):
            parts = [w[b] if k == 0 else w[b, 1:] for k, w in enumerate(self)]
            rows.append(np.concatenate(parts))
        return np.stack(rows)


def plan_batches(stream, batch: int, window: int) -> BatchPlan:
    stream = np.asarray(stream)
    if batch < 1 or window < 1:
        raise UsageError("batch size and window length must be positive")
    if len(stream) < batch * (window + 1):
        raise UsageError(f"stream of {len(stream)} symbols is too short for {batch} lanes of {window + 1}")
    lane = len(stream) // batch
    return BatchPlan(stream[:lane * batch].reshape(batch, lane), window)


def synthetic_word_corpus(n_chars: int, lexicon_size: int = 50, min_len: int = 3, max_len: int = 8,
                          seed: int = 0) -> tuple[str, list[str]]:
    """Random words from a fixed random lexicon, separated by single spaces."""
    rng = np.random.default_rng(seed)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    lexicon: list[str] = []
    while len(lexicon) < lexicon_size:
        word = "".join(rng.choice(letters, size=int(rng.integers(min_len, max_len + 1))))
        if word not in lexicon:
            lexicon.append(word)
    pieces, total = [], 0
    while total < n_chars:
        word = lexicon[int(rng.integers(lexicon_size))]
        pieces.append(word)
        total += len(word) + 1
    return " ".join(pieces)[:n_chars], lexicon


def unigram_entropy_bits(stream, vocab_size: int) -> float:
    counts = np.bincount(np.asarray(stream), minlength=vocab_size).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())
