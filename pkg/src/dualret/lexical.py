"""BM25 over an in-memory inverted index.

Scoring is Robertson BM25 with the non-negative IDF variant
``ln(1 + (N - df + 0.5) / (df + 0.5))``. Tokens come from the same word rule
as the dense tokenizer; there is no stemming and no stopword list.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .index import RankedList
from .tokenizer import words


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    doc_ids: list[str]
    k1: float = 0.9
    b: float = 0.4

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_len(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths) if self.doc_lengths else 0.0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def build_bm25_index(corpus: Corpus, k1: float = 0.9, b: float = 0.4) -> InvertedIndex:
    if k1 < 0 or not 0 <= b <= 1:
        raise ValueError(f"need k1 >= 0 and 0 <= b <= 1, got k1={k1}, b={b}")
    postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
    lengths = []
    for ordinal, doc in enumerate(corpus):
        toks = words(doc.full_text)
        lengths.append(len(toks))
        for term, tf in Counter(toks).items():
            postings[term].append((ordinal, tf))
    return InvertedIndex(dict(postings), lengths, corpus.ids, k1, b)


def bm25_scores(index: InvertedIndex, query_text: str) -> dict[int, float]:
    """Doc ordinal -> score for every document sharing a term with the query.

    Repeated query terms count once per occurrence.
    """
    avg = index.avg_doc_len
    k1, b = index.k1, index.b
    scores: dict[int, float] = defaultdict(float)
    for term in words(query_text):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for ordinal, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_lengths[ordinal] / avg)
            scores[ordinal] += idf * tf * (k1 + 1.0) / (tf + norm)
    return dict(scores)


def bm25_search(index: InvertedIndex, query_text: str, k: int, query_id: str = "") -> RankedList:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = bm25_scores(index, query_text)
    hits = sorted(((index.doc_ids[o], s) for o, s in scores.items()), key=lambda h: (-h[1], h[0]))[:k]
    return RankedList(query_id, [(d, float(s)) for d, s in hits], k)


def bm25_search_many(index: InvertedIndex, queries, k: int) -> list[RankedList]:
    return [bm25_search(index, q.text, k, q.id) for q in queries]


def score_matrix(index: InvertedIndex, query_texts) -> np.ndarray:
    """Dense [queries x docs] score matrix; handy for small corpora and tests."""
    out = np.zeros((len(query_texts), index.n_docs))
    for i, text in enumerate(query_texts):
        for o, s in bm25_scores(index, text).items():
            out[i, o] = s
    return out
