"""Whitespace tokenizer, vocabulary and token-embedding lookup."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from vidtox.autodiff import Tensor, embedding_lookup

PAD, UNK, SEP = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[SEP]")


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])


def split_words(transcript: str) -> list[str]:
    return transcript.lower().split()


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Frequency-ranked vocabulary, ties broken lexicographically.

    ``max_size`` counts the three reserved ids.
    """
    if max_size < 4:
        raise ValueError(f"max_size must be >= 4, got {max_size}")
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(split_words(text))
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [t for t, _ in ranked[: max_size - len(RESERVED)]])


def tokenize(transcript: str, vocab: Vocabulary, max_len: int) -> tuple[list[int], list[bool]]:
    """Map to ids, right-pad with PAD to ``max_len``; empty text becomes one UNK."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id(w) for w in split_words(transcript)][:max_len] or [UNK]
    mask = [True] * len(ids) + [False] * (max_len - len(ids))
    return ids + [PAD] * (max_len - len(ids)), mask


@dataclass
class TextEmbeddings:
    embeddings: Tensor
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.embeddings.rows


def embed_text(ids: Sequence[int], mask: Sequence[bool], table: Tensor) -> TextEmbeddings:
    m = np.asarray(mask, dtype=bool)
    if len(ids) != m.shape[0]:
        raise ValueError(f"{len(ids)} ids but mask of length {m.shape[0]}")
    if not m.any():
        raise ValueError("text must keep at least one token")
    return TextEmbeddings(embedding_lookup(table, ids), m)
