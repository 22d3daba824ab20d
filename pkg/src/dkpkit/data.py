"""Corpus ingestion: tokenization, vocabulary, and contiguous BPTT batches.

Character-level mode is the default desk-scale configuration; word mode
splits on whitespace.  The token stream is cut into ``batch_size`` contiguous
rows so each batch row keeps hidden-state continuity across windows, and
targets are the inputs shifted by one position.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

UNK_TOKEN = "<unk>"


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str]
    unk_id: int

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens) -> np.ndarray:
        unk = self.unk_id
        return np.fromiter((self.token_to_id.get(t, unk) for t in tokens),
                           dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def tokenize(text: str, mode: str) -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "word":
        return text.split()
    raise ValueError(f"unknown vocab mode: {mode}")


def build_vocab(text: str, mode: str = "char", min_count: int = 1) -> Vocab:
    """Deterministic vocabulary: frequency descending, then lexicographic.

    Tokens seen fewer than ``min_count`` times map to the unknown id, which
    always occupies id 0.  A literal "<unk>" token in the corpus also maps
    there.
    """
    tokens = tokenize(text, mode)
    if not tokens:
        raise ValueError("empty corpus")
    counts = Counter(tokens)
    counts.pop(UNK_TOKEN, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    id_to_token = [UNK_TOKEN] + kept
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    return Vocab(token_to_id=token_to_id, id_to_token=id_to_token, unk_id=0)


def load_text(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


class BatchIterator:
    """Contiguous (inputs, targets) windows over a token-id stream.

    The stream is split into ``batch_size`` equal contiguous rows; each call
    to :meth:`next_batch` advances every row by ``bptt`` positions, so row b
    of consecutive batches is one unbroken slice of the stream.  Trailing
    tokens that do not fill a full column are dropped.
    """

    def __init__(self, ids: np.ndarray, batch_size: int, bptt: int):
        ids = np.asarray(ids, dtype=np.int64)
        if batch_size < 1 or bptt < 1:
            raise ValueError("batch_size and bptt must be >= 1")
        per_row = len(ids) // batch_size
        if per_row < 2:
            raise ValueError("corpus too small for this batch size")
        self.rows = ids[: batch_size * per_row].reshape(batch_size, per_row)
        self.bptt = bptt
        self.cursor = 0
        self._done = False

    @property
    def batch_size(self) -> int:
        return self.rows.shape[0]

    def batches_per_epoch(self) -> int:
        usable = self.rows.shape[1] - 1
        return max((usable + self.bptt - 1) // self.bptt, 0) if usable > 0 else 0

    def reset(self) -> None:
        self.cursor = 0
        self._done = False

    def next_batch(self):
        """Next (inputs, targets) pair, or None exactly once at end of epoch."""
        if self._done:
            raise RuntimeError("iterator exhausted; call reset() for a new epoch")
        end = self.rows.shape[1] - 1
        if self.cursor >= end:
            self._done = True
            return None
        take = min(self.bptt, end - self.cursor)
        i = self.cursor
        inputs = self.rows[:, i:i + take]
        targets = self.rows[:, i + 1:i + 1 + take]
        self.cursor += take
        return inputs, targets

    def __iter__(self):
        self.reset()
        while True:
            batch = self.next_batch()
            if batch is None:
                return
            yield batch
