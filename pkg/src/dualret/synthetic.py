"""Seeded two-domain retrieval benchmark.

Each domain owns a disjoint vocabulary of topic words and entity words; both
share a pool of filler words. A document belongs to one topic and mentions a
few of that topic's entities. A query names some entities of a target document
plus a topic word, so the target is found by matching entities.

Three training sources mirror the two-stage recipe:

* ``pretrain``: generic pairs drawn from *both* domains' vocabularies, with no
  mined negatives (a stand-in for broad web question/answer data);
* ``finetune``: search pairs over the in-domain corpus with same-topic hard
  negatives;
* evaluation sets ``in_domain`` (fresh queries on the training corpus) and
  ``held_out`` (the other domain, never seen in fine-tuning).

Relevance is graded: 2 for documents holding every query entity, 1 for
same-topic documents holding at least one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Document, QrelSet, Query, TrainingExample, save_corpus, save_qrels, save_queries


@dataclass(frozen=True)
class SyntheticConfig:
    n_topics: int = 8
    docs_per_topic: int = 16
    topic_words: int = 6
    entity_pool: int = 40
    entities_per_doc: int = 4
    filler_words: int = 60
    doc_len: int = 24
    query_entities: int = 2
    pretrain_pairs: int = 1200
    train_queries_per_doc: int = 2
    eval_queries: int = 48
    hard_negatives: int = 3
    seed: int = 0


@dataclass
class EvalSet:
    name: str
    corpus: Corpus
    queries: list[Query]
    qrels: QrelSet
    held_out: bool = False


@dataclass
class Benchmark:
    pretrain: list[TrainingExample]
    finetune: list[TrainingExample]
    eval_sets: list[EvalSet] = field(default_factory=list)

    def texts(self):
        """Every text the training stages can see (for building a vocabulary)."""
        for ex in self.pretrain + self.finetune:
            yield ex.query.text
            yield ex.positive.full_text
            for d in ex.hard_negatives:
                yield d.full_text

    def eval_set(self, name: str) -> EvalSet:
        for s in self.eval_sets:
            if s.name == name:
                return s
        raise KeyError(name)


class _Domain:
    def __init__(self, prefix, cfg: SyntheticConfig, rng):
        self.prefix = prefix
        self.cfg = cfg
        self.rng = rng
        self.topics = [[f"{prefix}t{t}w{i}" for i in range(cfg.topic_words)] for t in range(cfg.n_topics)]
        self.entities = [[f"{prefix}t{t}e{i}" for i in range(cfg.entity_pool)] for t in range(cfg.n_topics)]

    def passage(self, topic, ents, fillers):
        cfg, rng = self.cfg, self.rng
        body = list(ents) + list(rng.choice(self.topics[topic], 3, replace=False))
        n_fill = max(0, cfg.doc_len - len(body))
        body += list(rng.choice(fillers, n_fill))
        rng.shuffle(body)
        return " ".join(body)

    def query(self, topic, ents, fillers):
        body = list(ents) + [str(self.rng.choice(self.topics[topic])), str(self.rng.choice(fillers))]
        self.rng.shuffle(body)
        return " ".join(body)

    def sample_entities(self, topic, n):
        return [str(e) for e in self.rng.choice(self.entities[topic], n, replace=False)]


def _grades(doc_ents, doc_topics, topic, q_ents):
    grades = {}
    qs = set(q_ents)
    for did, ents in doc_ents.items():
        hit = len(qs & ents)
        if hit == len(qs):
            grades[did] = 2
        elif hit and doc_topics[did] == topic:
            grades[did] = 1
    return grades


def _build_corpus(dom: _Domain, fillers):
    cfg = dom.cfg
    docs, doc_ents, doc_topics = [], {}, {}
    for t in range(cfg.n_topics):
        for j in range(cfg.docs_per_topic):
            did = f"{dom.prefix}d{t}_{j}"
            ents = dom.sample_entities(t, cfg.entities_per_doc)
            docs.append(Document(did, "", dom.passage(t, ents, fillers)))
            doc_ents[did] = set(ents)
            doc_topics[did] = t
    return Corpus(docs), doc_ents, doc_topics


def _queries_for(dom, corpus, doc_ents, doc_topics, fillers, n, qprefix):
    """``n`` queries, each aimed at a random target document."""
    cfg, rng = dom.cfg, dom.rng
    queries, qrels, targets = [], QrelSet(), []
    ids = corpus.ids
    for i in range(n):
        did = ids[int(rng.integers(len(ids)))]
        t = doc_topics[did]
        q_ents = [str(e) for e in rng.choice(sorted(doc_ents[did]), cfg.query_entities, replace=False)]
        qid = f"{qprefix}{i}"
        queries.append(Query(qid, dom.query(t, q_ents, fillers)))
        for d, g in _grades(doc_ents, doc_topics, t, q_ents).items():
            qrels.add(qid, d, g)
        targets.append(did)
    return queries, qrels, targets


def generate_benchmark(cfg: SyntheticConfig = SyntheticConfig()) -> Benchmark:
    rng = np.random.default_rng(cfg.seed)
    fillers = [f"f{i}" for i in range(cfg.filler_words)]
    home, away = _Domain("a", cfg, rng), _Domain("b", cfg, rng)

    pretrain = []
    for i in range(cfg.pretrain_pairs):
        dom = home if i % 2 == 0 else away
        t = int(rng.integers(cfg.n_topics))
        ents = dom.sample_entities(t, cfg.entities_per_doc)
        q_ents = ents[: cfg.query_entities]
        pretrain.append(TrainingExample(
            Query(f"pq{i}", dom.query(t, q_ents, fillers)),
            Document(f"pp{i}", "", dom.passage(t, ents, fillers)),
        ))

    eval_sets = []
    finetune = []
    for dom, name, held_out in ((home, "in_domain", False), (away, "held_out", True)):
        corpus, doc_ents, doc_topics = _build_corpus(dom, fillers)
        if not held_out:
            n_train = cfg.train_queries_per_doc * len(corpus)
            tq, tqrels, targets = _queries_for(dom, corpus, doc_ents, doc_topics, fillers, n_train, "tq")
            for q, did in zip(tq, targets):
                judged = tqrels.for_query(q.id)
                t = doc_topics[did]
                pool = [d for d in corpus.ids if doc_topics[d] == t and judged.get(d, 0) == 0]
                picks = rng.choice(len(pool), min(cfg.hard_negatives, len(pool)), replace=False)
                finetune.append(TrainingExample(q, corpus[did], tuple(corpus[pool[int(p)]] for p in picks)))
        queries, qrels, _ = _queries_for(dom, corpus, doc_ents, doc_topics, fillers, cfg.eval_queries,
                                         f"{dom.prefix}q")
        eval_sets.append(EvalSet(name, corpus, queries, qrels, held_out))
    return Benchmark(pretrain, finetune, eval_sets)


def write_benchmark(bench: Benchmark, out_dir, eval_set: str = "held_out") -> dict[str, Path]:
    """Write the fine-tuning data and one evaluation set as CLI-ready files.

    The training corpus is the in-domain corpus; pairs, negatives, queries and
    qrels use the formats the loaders read. Returns name -> path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_corpus = bench.eval_set("in_domain").corpus
    target = bench.eval_set(eval_set)
    paths = {
        "train_corpus": out / "train_corpus.jsonl",
        "train_queries": out / "train_queries.jsonl",
        "pairs": out / "pairs.tsv",
        "negatives": out / "negatives.tsv",
        "corpus": out / "corpus.jsonl",
        "queries": out / "queries.jsonl",
        "qrels": out / "qrels.tsv",
    }
    save_corpus(train_corpus, paths["train_corpus"])
    save_queries([ex.query for ex in bench.finetune], paths["train_queries"])
    with open(paths["pairs"], "w", encoding="utf-8") as fh:
        for ex in bench.finetune:
            fh.write(f"{ex.query.id}\t{ex.positive.id}\n")
    with open(paths["negatives"], "w", encoding="utf-8") as fh:
        for ex in bench.finetune:
            fh.write(f"{ex.query.id}\t{','.join(d.id for d in ex.hard_negatives)}\n")
    save_corpus(target.corpus, paths["corpus"])
    save_queries(target.queries, paths["queries"])
    save_qrels(target.qrels, paths["qrels"])
    return paths
