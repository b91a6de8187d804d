"""Documents, queries, relevance judgements and training triples.

Readers accept the BEIR interchange layout: a jsonl corpus with ``_id``,
``title`` and ``text`` fields, jsonl or tsv queries, and TREC 4-column qrels.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """A malformed record in an input file."""


class DuplicateIdError(DataFormatError):
    pass


class UnknownDocumentError(KeyError):
    pass


def count_words(title: str, text: str) -> int:
    return len((title + " " + text).split())


@dataclass(frozen=True)
class Document:
    id: str
    title: str = ""
    text: str = ""
    word_count: int = field(default=-1, compare=False)

    def __post_init__(self):
        if not self.id:
            raise DataFormatError("document id must be non-empty")
        if self.word_count < 0:
            object.__setattr__(self, "word_count", count_words(self.title, self.text))

    @property
    def full_text(self) -> str:
        return f"{self.title} {self.text}".strip()


@dataclass(frozen=True)
class Query:
    id: str
    text: str = ""

    def __post_init__(self):
        if not self.id:
            raise DataFormatError("query id must be non-empty")


class Corpus:
    """Ordered, id-indexed collection of documents."""

    def __init__(self, documents: Iterable[Document] = ()):
        self.documents: list[Document] = []
        self.index_by_id: dict[str, int] = {}
        for doc in documents:
            if doc.id in self.index_by_id:
                raise DuplicateIdError(f"duplicate document id {doc.id!r}")
            self.index_by_id[doc.id] = len(self.documents)
            self.documents.append(doc)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.index_by_id

    def __getitem__(self, doc_id: str) -> Document:
        try:
            return self.documents[self.index_by_id[doc_id]]
        except KeyError:
            raise UnknownDocumentError(doc_id) from None

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and self.documents == other.documents

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.documents]


class QrelSet:
    """Graded judgements; absent (query, doc) pairs have grade 0."""

    def __init__(self, judgements: Mapping[tuple[str, str], int] | None = None):
        self._by_query: dict[str, dict[str, int]] = {}
        for (qid, did), grade in (judgements or {}).items():
            self.add(qid, did, grade)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        if not isinstance(grade, (int, np.integer)) or grade < 0:
            raise DataFormatError(f"grade must be a non-negative integer, got {grade!r}")
        self._by_query.setdefault(query_id, {})[doc_id] = int(grade)

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._by_query.get(query_id, {}).get(doc_id, 0)

    def for_query(self, query_id: str) -> dict[str, int]:
        return dict(self._by_query.get(query_id, {}))

    @property
    def query_ids(self) -> list[str]:
        return list(self._by_query)

    @property
    def judgements(self) -> dict[tuple[str, str], int]:
        return {(q, d): g for q, docs in self._by_query.items() for d, g in docs.items()}

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_query.values())


@dataclass(frozen=True)
class TrainingExample:
    query: Query
    positive: Document
    hard_negatives: tuple[Document, ...] = ()

    def __post_init__(self):
        ids = [d.id for d in self.hard_negatives]
        if self.positive.id in ids:
            raise DataFormatError(
                f"positive {self.positive.id!r} listed as a hard negative of {self.query.id!r}"
            )
        if len(set(ids)) != len(ids):
            raise DataFormatError(f"repeated hard negative for query {self.query.id!r}")
        object.__setattr__(self, "hard_negatives", tuple(self.hard_negatives))


def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    ext = os.path.splitext(str(path))[1].lower()
    return "tsv" if ext in (".tsv", ".txt") else "jsonl"


def _iter_records(path, fmt, fields):
    """Yield (line_number, dict) for each non-blank record."""
    with open(path, encoding="utf-8") as fh:
        header_skipped = False
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if fmt == "jsonl":
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataFormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
                if not isinstance(rec, dict):
                    raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
            elif fmt == "tsv":
                parts = line.split("\t")
                if not header_skipped and parts[0] in ("_id", "id", "query-id"):
                    header_skipped = True
                    continue
                header_skipped = True
                if len(parts) < 2:
                    raise DataFormatError(f"{path}:{lineno}: expected at least 2 tab-separated fields")
                rec = dict(zip(fields, parts))
            else:
                raise ValueError(f"unknown format {fmt!r}")
            rec_id = rec.get("_id", rec.get("id"))
            if rec_id is None or str(rec_id) == "":
                raise DataFormatError(f"{path}:{lineno}: record has no id")
            if "text" not in rec:
                raise DataFormatError(f"{path}:{lineno}: record {rec_id!r} has no text field")
            rec["_id"] = str(rec_id)
            yield lineno, rec


def load_corpus(path, format: str | None = None) -> Corpus:
    """Read a corpus file, preserving record order.

    tsv rows are ``id<TAB>text`` or ``id<TAB>title<TAB>text``.
    """
    fmt = _infer_format(path, format)
    docs = []
    seen: dict[str, int] = {}
    for lineno, rec in _iter_records(path, fmt, ("_id", "text", "extra")):
        if fmt == "tsv" and "extra" in rec:
            title, text = rec["text"], rec["extra"]
        else:
            title, text = rec.get("title") or "", rec["text"]
        if rec["_id"] in seen:
            raise DuplicateIdError(
                f"{path}:{lineno}: duplicate document id {rec['_id']!r} (first on line {seen[rec['_id']]})"
            )
        seen[rec["_id"]] = lineno
        docs.append(Document(rec["_id"], str(title), str(text or "")))
    return Corpus(docs)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus:
            fh.write(json.dumps({"_id": d.id, "title": d.title, "text": d.text}, ensure_ascii=False))
            fh.write("\n")


def load_queries(path, format: str | None = None) -> list[Query]:
    fmt = _infer_format(path, format)
    queries = []
    seen: dict[str, int] = {}
    for lineno, rec in _iter_records(path, fmt, ("_id", "text")):
        if rec["_id"] in seen:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate query id {rec['_id']!r}")
        seen[rec["_id"]] = lineno
        queries.append(Query(rec["_id"], str(rec["text"] or "")))
    return queries


def save_queries(queries: Iterable[Query], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({"_id": q.id, "text": q.text}, ensure_ascii=False) + "\n")


def load_qrels(path) -> QrelSet:
    """Parse ``qid iter did grade`` lines. A BEIR-style tsv header is skipped."""
    qrels = QrelSet()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and parts[0] == "query-id":
                continue
            if len(parts) == 3:  # BEIR tsv: qid did grade
                qid, did, raw = parts
            elif len(parts) == 4:
                qid, _, did, raw = parts
            else:
                raise DataFormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            try:
                grade = int(raw)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer grade {raw!r}") from None
            if grade < 0:
                raise DataFormatError(f"{path}:{lineno}: negative grade {grade}")
            qrels.add(qid, did, grade)
    return qrels


def save_qrels(qrels: QrelSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, did), g in qrels.judgements.items():
            fh.write(f"{qid} 0 {did} {g}\n")


def load_training_set(pairs_path, corpus: Corpus, queries, negatives_path=None) -> list[TrainingExample]:
    """Join query/positive pairs (and optional mined negatives) against a corpus.

    ``queries`` is a list of Query or a mapping id -> Query. Unknown negative ids
    are dropped and counted in a warning; an unknown positive is an error.
    """
    qmap = queries if isinstance(queries, Mapping) else {q.id: q for q in queries}
    negatives: dict[str, list[str]] = {}
    if negatives_path is not None:
        with open(negatives_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataFormatError(f"{negatives_path}:{lineno}: expected query_id<TAB>ids")
                negatives[parts[0]] = [x for x in parts[1].split(",") if x]

    examples = []
    skipped = 0
    with open(pairs_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise DataFormatError(f"{pairs_path}:{lineno}: expected query_id<TAB>doc_id")
            qid, pid = parts[0], parts[1]
            if qid not in qmap:
                raise DataFormatError(f"{pairs_path}:{lineno}: unknown query id {qid!r}")
            if pid not in corpus:
                raise UnknownDocumentError(f"{pairs_path}:{lineno}: positive {pid!r} not in corpus")
            negs = []
            for nid in negatives.get(qid, []):
                if nid not in corpus or nid == pid or nid in negs:
                    skipped += 1
                    continue
                negs.append(nid)
            examples.append(TrainingExample(qmap[qid], corpus[pid], tuple(corpus[n] for n in negs)))
    if skipped:
        logger.warning("skipped %d hard negatives (unknown id, duplicate, or equal to the positive)", skipped)
    return examples


def subsample_training_set(examples: list[TrainingExample], fraction: float, seed: int) -> list[TrainingExample]:
    """Keep ceil(fraction * N) whole examples, chosen uniformly over query ids.

    Queries are ordered by id before the seeded shuffle so the result does not
    depend on input order; the retained examples are returned sorted by query id.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    by_qid: dict[str, list[TrainingExample]] = {}
    for ex in examples:
        by_qid.setdefault(ex.query.id, []).append(ex)
    qids = sorted(by_qid)
    n_keep = math.ceil(fraction * len(qids))
    rng = np.random.default_rng(seed)
    keep = sorted(qids[i] for i in rng.permutation(len(qids))[:n_keep])
    return [ex for q in keep for ex in by_qid[q]]
