"""Graded-relevance IR metrics, run files and report tables.

Conventions follow trec_eval: linear gain, ``log2(rank + 1)`` discount, the
ideal ranking built from all judged grades, and unjudged documents count as
grade 0. Queries without relevant documents score 0 and stay in the mean.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .corpus import Corpus, QrelSet, UnknownDocumentError
from .index import RankedList

DEFAULT_METRICS = ("ndcg@10", "recall@100", "mrr@10")


def _doc_ids(ranked) -> list[str]:
    return ranked.doc_ids if isinstance(ranked, RankedList) else list(ranked)


def _grades(ranked, qrels, query_id):
    if isinstance(qrels, QrelSet):
        qid = query_id if query_id is not None else ranked.query_id
        return qrels.for_query(qid)
    return dict(qrels)


def _gain(grade: int, gain: str) -> float:
    if gain == "linear":
        return float(grade)
    if gain == "exponential":
        return float(2 ** grade - 1)
    raise ValueError(f"unknown gain {gain!r}")


def ndcg_at_k(ranked, qrels, k: int, gain: str = "linear", query_id: Optional[str] = None) -> float:
    """``qrels`` is a QrelSet (looked up by the list's query id) or a doc -> grade map."""
    if k < 1:
        raise ValueError("k must be >= 1")
    grades = _grades(ranked, qrels, query_id)
    dcg = sum(_gain(grades.get(d, 0), gain) / math.log2(r + 2) for r, d in enumerate(_doc_ids(ranked)[:k]))
    ideal = sorted((g for g in grades.values() if g > 0), reverse=True)[:k]
    idcg = sum(_gain(g, gain) / math.log2(r + 2) for r, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def recall_at_k(ranked, qrels, k: int, min_grade: int = 1, query_id: Optional[str] = None) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    grades = _grades(ranked, qrels, query_id)
    relevant = {d for d, g in grades.items() if g >= min_grade}
    if not relevant:
        return 0.0
    return len(relevant.intersection(_doc_ids(ranked)[:k])) / len(relevant)


def mrr_at_k(ranked, qrels, k: int, min_grade: int = 1, query_id: Optional[str] = None) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    grades = _grades(ranked, qrels, query_id)
    for r, d in enumerate(_doc_ids(ranked)[:k]):
        if grades.get(d, 0) >= min_grade:
            return 1.0 / (r + 1)
    return 0.0


def parse_metric(spec: str) -> tuple[str, int]:
    try:
        name, depth = spec.strip().lower().split("@")
        k = int(depth)
    except ValueError:
        raise ValueError(f"metric must look like name@k, got {spec!r}") from None
    if name not in ("ndcg", "recall", "mrr") or k < 1:
        raise ValueError(f"unknown metric {spec!r}")
    return name, k


@dataclass
class RunResult:
    dataset: str
    rankings: dict[str, RankedList]
    k_max: int

    @classmethod
    def from_lists(cls, dataset: str, lists: Iterable[RankedList], k_max: Optional[int] = None) -> "RunResult":
        lists = list(lists)
        if k_max is None:
            k_max = max((rl.k for rl in lists), default=0)
        return cls(dataset, {rl.query_id: rl for rl in lists}, k_max)


def evaluate_run(run: RunResult, qrels: QrelSet, metrics=DEFAULT_METRICS, gain: str = "linear",
                 min_grade: int = 1, skip_unjudged_queries: bool = False) -> dict[str, float]:
    """Mean of each metric over the judged queries.

    Judged queries missing from the run are scored as empty rankings. With
    ``skip_unjudged_queries`` the queries that have no relevant document are
    left out of the mean.
    """
    parsed = [parse_metric(m) for m in metrics]
    for (name, k), spec in zip(parsed, metrics):
        if k > run.k_max:
            raise ValueError(f"{spec} needs rankings of depth {k}, run {run.dataset!r} keeps only {run.k_max}")
    qids = qrels.query_ids
    if skip_unjudged_queries:
        qids = [q for q in qids if any(g >= min_grade for g in qrels.for_query(q).values())]
    out = {}
    for (name, k), spec in zip(parsed, metrics):
        vals = []
        for qid in qids:
            ranked = run.rankings.get(qid, RankedList(qid, [], run.k_max))
            grades = qrels.for_query(qid)
            if name == "ndcg":
                vals.append(ndcg_at_k(ranked, grades, k, gain))
            elif name == "recall":
                vals.append(recall_at_k(ranked, grades, k, min_grade))
            else:
                vals.append(mrr_at_k(ranked, grades, k, min_grade))
        out[spec] = sum(vals) / len(vals) if vals else 0.0
    return out


@dataclass
class MetricsReport:
    per_dataset: dict[str, dict[str, float]]
    average: dict[str, float]
    excluded: Optional[str] = None
    average_excluding: dict[str, float] = field(default_factory=dict)

    @property
    def metrics(self) -> list[str]:
        names: list[str] = []
        for vals in self.per_dataset.values():
            names.extend(m for m in vals if m not in names)
        return names

    def to_table(self) -> str:
        """Tab-separated datasets x metrics table with average rows."""
        cols = self.metrics
        lines = ["dataset\t" + "\t".join(cols)]
        for name, vals in self.per_dataset.items():
            lines.append(name + "\t" + "\t".join(_fmt(vals.get(c)) for c in cols))
        lines.append("Avg\t" + "\t".join(_fmt(self.average.get(c)) for c in cols))
        if self.excluded is not None:
            lines.append(f"Avg w/o {self.excluded}\t" + "\t".join(_fmt(self.average_excluding.get(c)) for c in cols))
        return "\n".join(lines) + "\n"

    def to_key_values(self) -> str:
        lines = [f"{ds}.{m}={v:.6f}" for ds, vals in self.per_dataset.items() for m, v in vals.items()]
        lines += [f"avg.{m}={v:.6f}" for m, v in self.average.items()]
        if self.excluded is not None:
            lines += [f"avg_without_{self.excluded}.{m}={v:.6f}" for m, v in self.average_excluding.items()]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _mean_by_metric(rows: list[Mapping[str, float]]) -> dict[str, float]:
    keys: list[str] = []
    for r in rows:
        keys.extend(m for m in r if m not in keys)
    out = {}
    for m in keys:
        vals = [r[m] for r in rows if m in r]
        out[m] = sum(vals) / len(vals)
    return out


def aggregate_reports(per_dataset: Mapping[str, Mapping[str, float]], exclude: Optional[str] = None) -> MetricsReport:
    """Unweighted mean across datasets, optionally also without ``exclude``."""
    if not per_dataset:
        raise ValueError("need at least one dataset")
    if exclude is not None and exclude not in per_dataset:
        raise KeyError(f"cannot exclude unknown dataset {exclude!r}")
    rows = {k: dict(v) for k, v in per_dataset.items()}
    report = MetricsReport(rows, _mean_by_metric(list(rows.values())))
    if exclude is not None:
        rest = [v for k, v in rows.items() if k != exclude]
        if not rest:
            raise ValueError(f"excluding {exclude!r} leaves no datasets to average")
        report.excluded = exclude
        report.average_excluding = _mean_by_metric(rest)
    return report


def median_topk_doc_length(run: RunResult, corpus: Corpus, k: int = 10) -> float:
    """Median word count pooled over every query's top-k hits."""
    pool = []
    for ranked in run.rankings.values():
        for doc_id in ranked.doc_ids[:k]:
            if doc_id not in corpus:
                raise UnknownDocumentError(f"retrieved doc {doc_id!r} is not in the corpus")
            pool.append(corpus[doc_id].word_count)
    if not pool:
        raise ValueError("run has no retrieved documents")
    return float(statistics.median(pool))


def write_run(run: RunResult, path, tag: str = "dualret") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_run_lines(run.rankings.values(), tag))


def format_run_lines(lists: Iterable[RankedList], tag: str = "dualret") -> str:
    out = []
    for rl in lists:
        for rank, (doc_id, score) in enumerate(rl.hits, start=1):
            out.append(f"{rl.query_id} Q0 {doc_id} {rank} {score:.6f} {tag}\n")
    return "".join(out)


def read_run(path, dataset: str = "run") -> RunResult:
    """Read a TREC run; hits are re-sorted by (rank) as written."""
    by_q: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 'qid Q0 did rank score tag'")
            qid, _, did, rank, score, _ = parts
            by_q.setdefault(qid, []).append((int(rank), did, float(score)))
    lists = []
    for qid, hits in by_q.items():
        hits.sort()
        lists.append(RankedList(qid, [(d, s) for _, d, s in hits], len(hits)))
    k_max = max((len(h) for h in by_q.values()), default=0)
    return RunResult(dataset, {rl.query_id: rl for rl in lists}, k_max)
