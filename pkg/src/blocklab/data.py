"""Character-level corpus ingestion and deterministic batch sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    vocab: bytes               # sorted unique corpus bytes
    train_ids: np.ndarray      # uint16 token stream
    val_ids: np.ndarray
    split: float

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: bytes | str) -> np.ndarray:
        if isinstance(text, str):
            text = text.encode("latin-1")
        table = {b: i for i, b in enumerate(self.vocab)}
        return np.array([table[b] for b in text], dtype=np.uint16)

    def decode(self, ids) -> str:
        return bytes(self.vocab[i] for i in ids).decode("latin-1")


def load_corpus(path: str, split: float = 0.9, seed: int = 0) -> Dataset:
    """Byte-level tokenization with a contiguous train/validation split.

    Every corpus byte maps to exactly one token id; the split is
    deterministic (leading fraction -> train) for any seed.
    """
    if not 0.0 < split < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise ValueError(f"corpus {path} is empty")
    vocab = bytes(sorted(set(raw)))
    table = {b: i for i, b in enumerate(vocab)}
    lut = np.zeros(256, dtype=np.uint16)
    for b, i in table.items():
        lut[b] = i
    ids = lut[np.frombuffer(raw, dtype=np.uint8)]
    cut = int(len(ids) * split)
    if cut < 2 or len(ids) - cut < 2:
        raise ValueError("corpus too small for the requested split")
    return Dataset(vocab=vocab, train_ids=ids[:cut], val_ids=ids[cut:], split=split)


def sample_windows(
    ids: np.ndarray, count: int, window: int, rng: np.random.Generator
) -> np.ndarray:
    """Contiguous token windows at uniformly random offsets."""
    if len(ids) <= window:
        raise ValueError("token stream shorter than one window")
    offsets = rng.integers(0, len(ids) - window, size=count)
    return np.stack([ids[o:o + window] for o in offsets]).astype(np.int64)


def fixed_windows(ids: np.ndarray, count: int, window: int) -> np.ndarray:
    """Evenly spaced windows, the fixed held-out evaluation set."""
    if len(ids) <= window:
        raise ValueError("token stream shorter than one window")
    starts = np.linspace(0, len(ids) - window - 1, count).astype(np.int64)
    return np.stack([ids[o:o + window] for o in starts]).astype(np.int64)
