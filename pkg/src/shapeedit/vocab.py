"""Closed instruction/caption vocabulary and tokenizer."""

from __future__ import annotations

import re

import numpy as np

from .microworld import COLORS, SHAPES, STYLES

PAD, UNK = 0, 1
_WORDS = (
    "replace the with a in image remove from add to left right side center of "
    "change background and scene daytime nighttime apply style on at"
).split()
WORDS: tuple[str, ...] = ("<pad>", "<unk>", *_WORDS, *STYLES, *SHAPES, *COLORS)
VOCAB: dict[str, int] = {w: i for i, w in enumerate(WORDS)}
VOCAB_SIZE = 64
TEXT_LEN = 16

assert len(WORDS) <= VOCAB_SIZE


def tokenize(text: str, length: int = TEXT_LEN) -> np.ndarray:
    ids = [VOCAB.get(w, UNK) for w in re.findall(r"[a-z]+", text.lower())][:length]
    out = np.full(length, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def null_tokens(batch: int, length: int = TEXT_LEN) -> np.ndarray:
    return np.full((batch, length), PAD, dtype=np.int64)
