"""Prompt templates, the word-level vocabulary, and prompt embedding.

Templates are plain text in which ``[v]`` marks a learnable slot::

    a photo of a [v] [v] [v] [v] person .

Punctuation is split into its own token. Every fixed word must be in the
vocabulary; learnable slots are numbered left to right.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .tensor import Tensor, VocabularyError, concat, reshape, take_rows

LEARNABLE_MARK = "[v]"

CATALOG: dict[str, str] = {
    "default": "A photo of a [v] [v] [v] [v] person.",
    "longer": "A person wearing " + " ".join([LEARNABLE_MARK] * 16) + ".",
    "random": " ".join([LEARNABLE_MARK] * 16),
    "attr_a": ("A person, gender is [v], hair is [v] [v], with [v] [v] hat, carry [v] backpack, "
               "carry [v] handbag, wearing [v] [v], [v] [v] and [v] [v]"),
    "attr_b": ("A [v] person with [v] hair, [v] hat, carry [v] backpack and [v] handbag, "
               "wearing [v] [v], [v] [v] and [v] [v]"),
    "attr_c": ("A person, gender is [v], hair is [v] [v], with [v] [v] hat, carry [v] backpack, "
               "carry [v] handbag, wearing [v] [v], [v] [v] and [v] [v], may be occluded or not"),
    "attr_d": ("A [v] person with [v] hair, [v] hat, carry [v] backpack and [v] handbag, "
               "wearing [v] [v], [v] [v] and [v] [v], may be occluded or not"),
}

# Attribute value words, so that hand-written templates can mention them.
_VALUE_WORDS = (
    "male female short long bald no black white red green blue yellow gray brown "
    "plain striped checked jacket shirt dress pants shorts skirt shoes boots sandals "
    "sneakers slim average heavy top bottom color style build"
).split()

_SPECIALS = ["<pad>", "<eot>"]


def tokenize(text: str) -> list[str]:
    return re.findall(r"\[v\]|[a-z0-9']+|[.,!?;:]", text.lower())


def build_vocabulary(extra_words: Sequence[str] = ()) -> list[str]:
    words: list[str] = list(_SPECIALS)
    seen = set(words)
    sources = [tok for text in CATALOG.values() for tok in tokenize(text)]
    for w in sources + _VALUE_WORDS + [w.lower() for w in extra_words]:
        if w != LEARNABLE_MARK and w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class Fixed:
    token_id: int


@dataclass(frozen=True)
class Learnable:
    slot: int


Slot = Union[Fixed, Learnable]


@dataclass(frozen=True)
class PromptTemplate:
    """Ordered mix of fixed tokens and per-identity learnable slots."""

    token_slots: tuple[Slot, ...]
    per_identity: bool = True
    name: str = "custom"

    def __post_init__(self):
        idx = [s.slot for s in self.token_slots if isinstance(s, Learnable)]
        if sorted(idx) != list(range(len(idx))):
            raise ValueError(f"learnable slot indices must be 0..r-1 each used once, got {idx}")
        if not self.token_slots:
            raise ValueError("empty template")

    @property
    def r(self) -> int:
        return sum(isinstance(s, Learnable) for s in self.token_slots)

    def __len__(self) -> int:
        return len(self.token_slots)

    @classmethod
    def parse(cls, text: str, vocab: Sequence[str], name: str = "custom") -> "PromptTemplate":
        lookup = {w: i for i, w in enumerate(vocab)}
        slots: list[Slot] = []
        r = 0
        for tok in tokenize(text):
            if tok == LEARNABLE_MARK:
                slots.append(Learnable(r))
                r += 1
            elif tok in lookup:
                slots.append(Fixed(lookup[tok]))
            else:
                raise VocabularyError(f"word {tok!r} is not in the vocabulary")
        return cls(tuple(slots), name=name)

    @classmethod
    def from_catalog(cls, name: str, vocab: Sequence[str]) -> "PromptTemplate":
        if name not in CATALOG:
            raise KeyError(f"unknown template {name!r}; choose from {sorted(CATALOG)}")
        return cls.parse(CATALOG[name], vocab, name=name)

    @classmethod
    def from_file(cls, path: str | Path, vocab: Sequence[str]) -> "PromptTemplate":
        lines = [ln for ln in Path(path).read_text().splitlines()
                 if ln.strip() and not ln.lstrip().startswith("#")]
        return cls.parse(" ".join(lines), vocab, name=Path(path).stem)

    def source_index(self, identities: np.ndarray, vocab_size: int) -> np.ndarray:
        """Row indices into ``concat([table, V.reshape(K*r, d)])``."""
        identities = np.asarray(identities, dtype=np.int64)
        r = self.r
        out = np.empty(identities.shape + (len(self),), dtype=np.int64)
        for pos, s in enumerate(self.token_slots):
            if isinstance(s, Fixed):
                out[..., pos] = s.token_id
            else:
                out[..., pos] = vocab_size + identities * r + s.slot
        return out


def embed_prompt(template: PromptTemplate, identity, V: Tensor | None, table: Tensor) -> Tensor:
    """Token embeddings for one identity (``[len, d]``) or a batch (``[n, len, d]``).

    Fixed slots are read from the frozen embedding table and learnable slots
    from ``V[identity]``; both are exact row copies.
    """
    vocab_size, d = table.shape
    for s in template.token_slots:
        if isinstance(s, Fixed) and not 0 <= s.token_id < vocab_size:
            raise VocabularyError(f"token id {s.token_id} outside vocabulary of size {vocab_size}")
    ids = np.asarray(identity, dtype=np.int64)
    if template.r == 0:
        return take_rows(table, template.source_index(ids, vocab_size))
    if V is None:
        raise ValueError("template has learnable slots but no pseudo-label set was given")
    K, r, dv = V.shape
    if r != template.r or dv != d:
        raise ValueError(f"pseudo-label set {V.shape} does not fit template r={template.r}, d={d}")
    if ids.size and (ids.min() < 0 or ids.max() >= K):
        raise IndexError(f"identity outside 0..{K - 1}")
    source = concat([table, reshape(V, (K * r, d))], axis=0)
    return take_rows(source, template.source_index(ids, vocab_size))
