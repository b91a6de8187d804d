"""Word-level vocabulary with hashed out-of-vocabulary buckets.

Id layout: 0 is PAD, ``1 .. oov_buckets`` are OOV buckets, and in-vocabulary
words follow from ``oov_buckets + 1`` in frequency order.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

PAD_ID = 0
OOV_BASE = 1

# query / document truncation defaults used throughout training and evaluation
QUERY_MAX_LEN = 64
DOC_MAX_LEN = 512

_PUNCT = re.compile(r"[^\w\s]|_")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(s: str) -> int:
    h = _FNV_OFFSET
    for byte in s.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def words(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    length: int

    @property
    def max_len(self) -> int:
        return len(self.ids)


class Vocab:
    def __init__(self, token_to_id: dict[str, int], oov_buckets: int = 1):
        if oov_buckets < 1:
            raise ValueError("oov_buckets must be >= 1")
        self.oov_buckets = int(oov_buckets)
        self.token_to_id = dict(token_to_id)
        first = self.oov_buckets + 1
        ids = sorted(self.token_to_id.values())
        if ids != list(range(first, first + len(ids))):
            raise ValueError(f"word ids must be dense starting at {first}")

    @property
    def num_words(self) -> int:
        return len(self.token_to_id)

    @property
    def size(self) -> int:
        return 1 + self.oov_buckets + self.num_words

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocab)
            and self.oov_buckets == other.oov_buckets
            and self.token_to_id == other.token_to_id
        )

    def token_id(self, word: str) -> int:
        tid = self.token_to_id.get(word)
        if tid is None:
            tid = OOV_BASE + fnv1a_64(word) % self.oov_buckets
        return tid

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#vocab\tnum_words={self.num_words}\toov_buckets={self.oov_buckets}\n")
            for tok, tid in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                fh.write(f"{tok}\t{tid}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if not header or header[0] != "#vocab":
                raise ValueError(f"{path}: missing vocab header")
            meta = dict(kv.split("=", 1) for kv in header[1:])
            mapping = {}
            for line in fh:
                if not line.strip():
                    continue
                tok, tid = line.rstrip("\n").split("\t")
                mapping[tok] = int(tid)
        vocab = cls(mapping, int(meta["oov_buckets"]))
        if vocab.num_words != int(meta["num_words"]):
            raise ValueError(f"{path}: header says {meta['num_words']} words, found {vocab.num_words}")
        return vocab


def build_vocab(texts: Iterable, max_vocab: int, oov_buckets: int = 1) -> Vocab:
    """Keep the ``max_vocab`` most frequent words, ties broken lexicographically.

    ``texts`` may be a Corpus (title and text are both counted) or any iterable
    of strings.
    """
    if max_vocab < 1:
        raise ValueError("max_vocab must be >= 1")
    counts: Counter[str] = Counter()
    for item in texts:
        counts.update(words(item if isinstance(item, str) else item.full_text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_vocab]
    first = oov_buckets + 1
    return Vocab({w: first + i for i, (w, _) in enumerate(ranked)}, oov_buckets)


def encode_text(vocab: Vocab, text: str, max_len: int) -> TokenSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks = [vocab.token_id(w) for w in words(text)[:max_len]]
    ids = np.zeros(max_len, dtype=np.int64)
    ids[: len(toks)] = toks
    return TokenSequence(ids, len(toks))


def encode_texts(vocab: Vocab, texts: Iterable[str], max_len: int) -> np.ndarray:
    """Token id matrix [len(texts), max_len], right-padded with PAD."""
    rows = [encode_text(vocab, t, max_len).ids for t in texts]
    if not rows:
        return np.zeros((0, max_len), dtype=np.int64)
    return np.stack(rows)
