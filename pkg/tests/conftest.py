import math

import numpy as np
import pytest

from dualret.corpus import Corpus, Document
from dualret.encoder import EncoderConfig


def unit_rows(rng, n, d, dtype=np.float64):
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(dtype)


def softmax_loss_oracle(q, pos, neg=None, tau=1.0):
    """Direct summation of -log softmax over positives and batch-shared negatives."""
    cands = [p for p in pos] + ([n for n in neg] if neg is not None else [])
    total = 0.0
    for i, qi in enumerate(q):
        num = math.exp(float(np.dot(qi, pos[i])) / tau)
        den = sum(math.exp(float(np.dot(qi, c)) / tau) for c in cands)
        total += -math.log(num / den)
    return total / len(q)


def bidirectional_oracle(q, pos, neg=None, tau=1.0):
    return 0.5 * (softmax_loss_oracle(q, pos, neg, tau) + softmax_loss_oracle(pos, q, None, tau))


@pytest.fixture
def tiny_config():
    return EncoderConfig(vocab_size=20, model_dim=8, ffn_dim=16, num_layers=1, num_heads=2,
                         bottleneck_dim=4, max_len=16)


@pytest.fixture
def small_corpus():
    return Corpus([
        Document("d1", "Alpha", "the quick brown fox"),
        Document("d2", "", "jumps over the lazy dog"),
        Document("d3", "Gamma", "fox and dog, friends!"),
    ])


def run_cli(*argv):
    """Run the CLI in-process; returns (exit code, stdout text)."""
    import contextlib
    import io

    from dualret.cli import main

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in argv])
    return code, buf.getvalue()


def run_pipeline(data, work, steps=200, seed=7):
    """build-vocab -> train -> encode -> index -> search -> eval; returns the report path."""
    work.mkdir(parents=True, exist_ok=True)
    g = ["--seed", seed, "--threads", 1]
    steps_out = [
        ("build-vocab", "--corpus", data["train_corpus"], "--corpus", data["corpus"], "--queries",
         data["train_queries"], "--max-vocab", 5000, "--oov-buckets", 8, "--out", work / "vocab.txt"),
        ("train", "--stage", "finetune", "--vocab", work / "vocab.txt", "--corpus", data["train_corpus"],
         "--queries", data["train_queries"], "--pairs", data["pairs"], "--negatives", data["negatives"],
         "--set", f"train.steps={steps}", "--set", "train.batch_size=16", "--set", "train.init_lr=3e-3",
         "--set", "train.query_max_len=16", "--set", "train.doc_max_len=32",
         "--set", "encoder.model_dim=16", "--set", "encoder.ffn_dim=32", "--set", "encoder.num_layers=1",
         "--set", "encoder.num_heads=2", "--set", "encoder.bottleneck_dim=16", "--set", "encoder.max_len=32",
         "--out", work / "model.ckpt", "--log", work / "train.log"),
        ("encode", "--checkpoint", work / "model.ckpt", "--vocab", work / "vocab.txt", "--corpus", data["corpus"],
         "--max-len", 32, "--out", work / "docs.store"),
        ("index", "--store", work / "docs.store", "--clusters", 4, "--out", work / "ivf.npz"),
    ]
    for cmd in steps_out:
        code, _ = run_cli(*g, *cmd)
        assert code == 0, cmd[0]
    code, run_text = run_cli(*g, "search", "--store", work / "docs.store", "--queries", data["queries"],
                             "--k", 100, "--max-len", 16, "--ivf", work / "ivf.npz", "--n-probe", 4)
    assert code == 0
    (work / "run.trec").write_text(run_text)
    code, _ = run_cli(*g, "eval", "--run", work / "run.trec", "--qrels", data["qrels"], "--depth", 100,
                      "--report", work / "report.tsv")
    assert code == 0
    return work / "report.tsv"


def random_fixture(rng, n_docs=30, n_queries=5, max_grade=5, depth=30):
    docs = [f"d{i:02d}" for i in range(n_docs)]
    qrels, runs = {}, {}
    for q in range(n_queries):
        qid = f"q{q}"
        judged = rng.choice(docs, rng.integers(1, 10), replace=False)
        qrels[qid] = {str(d): int(rng.integers(0, max_grade + 1)) for d in judged}
        if not any(qrels[qid].values()):
            qrels[qid][str(judged[0])] = 1
        ranked = rng.permutation(docs)[: rng.integers(1, depth + 1)]
        runs[qid] = [str(d) for d in ranked]
    return qrels, runs


def reference_scores(qrels, runs):
    """pytrec_eval (trec_eval) per-query values; recip_rank is uncut, so MRR@10 cuts the run."""
    import pytrec_eval

    ev = pytrec_eval.RelevanceEvaluator(qrels, {"ndcg_cut.10", "recall.100"})
    full = {q: {d: float(len(ids) - i) for i, d in enumerate(ids)} for q, ids in runs.items()}
    cut = {q: {d: float(len(ids) - i) for i, d in enumerate(ids[:10])} for q, ids in runs.items()}
    a = ev.evaluate(full)
    b = pytrec_eval.RelevanceEvaluator(qrels, {"recip_rank"}).evaluate(cut)
    return {q: (a[q]["ndcg_cut_10"], a[q]["recall_100"], b[q]["recip_rank"]) for q in runs}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
