"""Acceptance criteria, one test each. Every test records a PASS/FAIL line
that is printed in the terminal summary (and to stdout with ``-s``)."""

import math
import statistics
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_fixture, reference_scores, run_pipeline, softmax_loss_oracle, unit_rows
from dualret import encoder as enc
from dualret.checkpoint import load_checkpoint, save_checkpoint
from dualret.corpus import Corpus, Document, load_corpus, save_corpus, subsample_training_set
from dualret.eval import RunResult, median_topk_doc_length, mrr_at_k, ndcg_at_k, recall_at_k
from dualret.experiments import desk_trend_spec, run_ablation, run_data_efficiency, run_scaling_sweep
from dualret.index import EmbeddingStore, RankedList, build_ivf, build_store, search_exact, search_ivf
from dualret.lexical import bm25_search, build_bm25_index
from dualret.synthetic import SyntheticConfig, generate_benchmark, write_benchmark
from dualret.trainer import TrainConfig, in_batch_loss, in_batch_loss_with_negatives, loss_and_grads
from test_lexical import reference_bm25


class Criterion:
    def __init__(self, number, title, budget_s):
        self.number, self.title, self.budget = number, title, budget_s
        self.t0 = time.perf_counter()
        self.checks = []

    def check(self, ok, what):
        self.checks.append((bool(ok), what))

    def finish(self):
        elapsed = time.perf_counter() - self.t0
        self.check(elapsed < self.budget, f"runtime {elapsed:.1f}s < {self.budget}s")
        failed = [w for ok, w in self.checks if not ok]
        status = "PASS" if not failed else "FAIL"
        detail = "; ".join(failed) if failed else "; ".join(w for _, w in self.checks)
        line = f"{status} criterion {self.number:2d} ({self.title}): {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not failed, line


@pytest.fixture
def criterion(request):
    number, title, budget = request.node.get_closest_marker("criterion").args
    return Criterion(number, title, budget)


@pytest.mark.criterion(1, "loss", 1.0)
def test_loss_correctness(criterion: Criterion):
    rng = np.random.default_rng(0)
    v = unit_rows(rng, 1, 8)
    criterion.check(in_batch_loss(v, v, 0.01)[0] == 0.0, "B=1 loss is exactly 0")
    e = np.eye(2)
    same = np.full((2, 2), 1 / math.sqrt(2))
    uniform = in_batch_loss(e, same, 0.01)[0]
    criterion.check(abs(uniform - math.log(2)) < 1e-9, f"uniform B=2 loss {uniform:.12f} = ln 2")
    worst = 0.0
    for _ in range(100):
        b, n, d = int(rng.integers(1, 9)), int(rng.integers(0, 5)), int(rng.integers(2, 9))
        tau = float(rng.choice([0.01, 0.05, 0.1, 1.0]))
        q, p = unit_rows(rng, b, d), unit_rows(rng, b, d)
        neg = unit_rows(rng, n, d) if n else None
        got = in_batch_loss_with_negatives(q, p, neg, tau)[0]
        worst = max(worst, abs(got - softmax_loss_oracle(q, p, neg, tau)))
    criterion.check(worst < 1e-10, f"max |loss - oracle| {worst:.1e} < 1e-10 over 100 batches")
    criterion.finish()


@pytest.mark.criterion(2, "gradient fidelity", 30.0)
def test_gradient_fidelity(criterion: Criterion):
    config = enc.EncoderConfig(vocab_size=20, model_dim=8, ffn_dim=16, num_layers=1, num_heads=2,
                               bottleneck_dim=4, max_len=16)
    train_cfg = TrainConfig(temperature=0.01)
    h = 1e-4
    # central differences of an O(10) loss carry ~eps*L/h ~ 2e-11 of round-off;
    # below this floor a relative error measures that noise, not the gradient
    floor = 1e-6
    worst_rel = worst_abs = 0.0
    checked = above_floor = 0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        params = enc.init_params(config, trial, np.float64)
        b, n_neg = int(rng.integers(2, 5)), int(rng.integers(0, 3))
        q = rng.integers(1, 20, size=(b, 6))
        d = rng.integers(1, 20, size=(b + n_neg, 8))
        for row in q:
            row[rng.integers(1, 7):] = 0
        for row in d:
            row[rng.integers(1, 9):] = 0

        def loss():
            return loss_and_grads(params, config, q, d, b, train_cfg)[0]

        _, grads = loss_and_grads(params, config, q, d, b, train_cfg)
        for name, arr in params.items():
            flat = arr.reshape(-1)
            for j in rng.choice(flat.size, min(12, flat.size), replace=False):
                old = flat[j]
                flat[j] = old + h
                fp = loss()
                flat[j] = old - h
                fm = loss()
                flat[j] = old
                num = (fp - fm) / (2 * h)
                ana = grads[name].reshape(-1)[j]
                worst_rel = max(worst_rel, abs(ana - num) / max(abs(ana), abs(num), floor))
                worst_abs = max(worst_abs, abs(ana - num))
                checked += 1
                above_floor += max(abs(ana), abs(num)) > floor
    criterion.check(worst_rel < 1e-4, f"max relative error {worst_rel:.2e} < 1e-4 over 20 trials "
                                      f"({checked} entries, {above_floor} above the {floor:g} floor, "
                                      f"max abs error {worst_abs:.1e})")
    criterion.finish()


@pytest.mark.criterion(3, "metric oracle", 5.0)
def test_metric_oracle(criterion: Criterion):
    got = ndcg_at_k(RankedList("q", [("d2", 2.0), ("d1", 1.0)], 10), {"d1": 2, "d2": 1}, 10)
    criterion.check(round(got, 5) == 0.85972, f"hand example {got:.5f} = 0.85972")
    worst = 0.0
    n_queries = 0
    for seed in range(50):
        qrels, runs = random_fixture(np.random.default_rng(seed), n_docs=150, n_queries=4, max_grade=5, depth=150)
        ref = reference_scores(qrels, runs)
        for qid, ids in runs.items():
            ranked = RankedList(qid, [(d, float(len(ids) - i)) for i, d in enumerate(ids)], len(ids))
            mine = (ndcg_at_k(ranked, qrels[qid], 10), recall_at_k(ranked, qrels[qid], 100),
                    mrr_at_k(ranked, qrels[qid], 10))
            worst = max(worst, float(np.max(np.abs(np.subtract(mine, ref[qid])))))
            n_queries += 1
    criterion.check(worst < 1e-6, f"max |diff| vs trec_eval {worst:.1e} < 1e-6 on 50 fixtures ({n_queries} queries)")
    criterion.finish()


@pytest.mark.criterion(4, "retrieval exactness", 10.0)
def test_retrieval_exactness(criterion: Criterion):
    rng = np.random.default_rng(11)
    store = build_store(unit_rows(rng, 1000, 32, np.float32), [f"doc{i:04d}" for i in rng.permutation(1000)])
    queries = unit_rows(rng, 50, 32, np.float32)
    mat64 = store.matrix.astype(np.float64)
    naive_ok = True
    for q in queries:
        s = mat64 @ q.astype(np.float64)
        naive = [store.doc_ids[i] for i in sorted(range(len(s)), key=lambda i: (-s[i], store.doc_ids[i]))[:10]]
        naive_ok &= search_exact(store, q, 10).doc_ids == naive
    criterion.check(naive_ok, "exact search = naive full sort on 1000 docs x 50 queries, k=10")
    index = build_ivf(store, 16, seed=0)
    ivf_ok = all(search_ivf(index, store, q, 10, 16) == search_exact(store, q, 10) for q in queries)
    criterion.check(ivf_ok, "IVF with n_probe=C equals exact (ids and float32 scores)")
    criterion.finish()


@pytest.mark.criterion(5, "BM25", 5.0)
def test_bm25(criterion: Criterion):
    one = bm25_search(build_bm25_index(Corpus([Document("d", "", "x")])), "x", 1).hits[0][1]
    criterion.check(abs(one - 0.287682) <= 1e-6, f"single-doc score {one:.6f}")
    rng = np.random.default_rng(5)
    texts = [" ".join(f"w{rng.integers(15)}" for _ in range(rng.integers(3, 20))) for _ in range(20)]
    index = build_bm25_index(Corpus([Document(f"d{i:02d}", "", t) for i, t in enumerate(texts)]))
    ok = True
    for _ in range(25):
        q = " ".join(f"w{rng.integers(17)}" for _ in range(rng.integers(1, 5)))
        ref = reference_bm25(texts, q, 0.9, 0.4)
        want = [f"d{i:02d}" for i in sorted(range(20), key=lambda i: (-ref[i], i)) if ref[i] > 0]
        ok &= bm25_search(index, q, 20).doc_ids == want
    criterion.check(ok, "20-doc rankings match the reference scorer on 25 queries")
    criterion.finish()


@pytest.mark.slow
@pytest.mark.criterion(6, "trend", 600.0)
def test_trend(criterion: Criterion):
    spec = desk_trend_spec()
    sweep = run_scaling_sweep(spec)
    bigger = []
    for seed in spec.seeds:
        s = sweep.select(config="S", seed=seed, dataset="held_out")[0]["ndcg@10"]
        l = sweep.select(config="L", seed=seed, dataset="held_out")[0]["ndcg@10"]
        bigger.append(l >= s)
        print(f"seed {seed}: held-out NDCG@10 S={s:.4f} L={l:.4f}")
    criterion.check(sum(bigger) >= 2, f"larger >= smaller held-out NDCG@10 in {sum(bigger)}/3 seeds")
    ablation = run_ablation(spec, "S", arms=("two-stage", "finetune-only"))
    wins = []
    for seed in spec.seeds:
        g = ablation.select(arm="two-stage", seed=seed, dataset="held_out")[0]["ndcg@10"]
        f = ablation.select(arm="finetune-only", seed=seed, dataset="held_out")[0]["ndcg@10"]
        wins.append(g >= f)
        print(f"seed {seed}: held-out NDCG@10 two-stage={g:.4f} finetune-only={f:.4f}")
    criterion.check(sum(wins) >= 2, f"two-stage >= finetune-only held-out NDCG@10 in {sum(wins)}/3 seeds")
    criterion.finish()


@pytest.mark.criterion(7, "determinism", 120.0)
def test_determinism(criterion: Criterion, tmp_path):
    bench = generate_benchmark(SyntheticConfig(pretrain_pairs=10))
    data = write_benchmark(bench, tmp_path / "data")
    runs = [run_pipeline(data, tmp_path / f"run{i}", steps=200, seed=3).parent for i in range(2)]
    for name in ("model.ckpt", "train.log", "docs.store", "ivf.npz", "run.trec", "report.tsv", "report.tsv.kv"):
        same = (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
        criterion.check(same, f"{name} identical")
    criterion.finish()


@pytest.mark.criterion(8, "round trips", 5.0)
def test_round_trips(criterion: Criterion, tmp_path):
    config = enc.EncoderConfig(vocab_size=50, model_dim=16, ffn_dim=32, num_layers=2, num_heads=4,
                               bottleneck_dim=8, max_len=32)
    params = enc.init_params(config, 1)
    save_checkpoint(params, config, tmp_path / "m.ckpt")
    again, cfg2 = load_checkpoint(tmp_path / "m.ckpt")
    same = cfg2 == config and again.keys() == params.keys() and all(
        again[k].dtype == params[k].dtype and again[k].tobytes() == params[k].tobytes() for k in params)
    criterion.check(same, "checkpoint bitwise")
    rng = np.random.default_rng(2)
    store = build_store(unit_rows(rng, 300, 24, np.float32), [f"p{i}" for i in range(300)])
    store.save(tmp_path / "s.store")
    loaded = EmbeddingStore.load(tmp_path / "s.store")
    criterion.check(loaded.matrix.tobytes() == store.matrix.tobytes() and loaded.doc_ids == store.doc_ids,
                    "embedding store bitwise")
    corpus = Corpus([
        Document("a", "Ünïcode title", "text with \"quotes\"\tand tab"),
        Document("b", "", "line\nbreak and emoji \U0001F600"),
        Document("c 1", "t", ""),
    ])
    save_corpus(corpus, tmp_path / "c.jsonl")
    criterion.check(load_corpus(tmp_path / "c.jsonl") == corpus, "corpus jsonl lossless")
    criterion.finish()


@pytest.mark.slow
@pytest.mark.criterion(9, "data efficiency", 600.0)
def test_data_efficiency(criterion: Criterion):
    bench = generate_benchmark(SyntheticConfig())
    n = len(bench.finetune)
    sub = subsample_training_set(bench.finetune, 0.1, 0)
    whole = {ex.query.id: ex for ex in bench.finetune}
    criterion.check(len(sub) == math.ceil(0.1 * n), f"0.1 keeps {len(sub)} of {n} = ceil(0.1 N)")
    criterion.check(all(whole[ex.query.id] == ex for ex in sub), "kept examples carry all their negatives")
    spec = desk_trend_spec()
    report = run_data_efficiency([0.1, 1.0], spec, "S")
    for frac in (0.1, 1.0):
        rows = report.select(fraction=frac)
        criterion.check(len(rows) == 2 * len(spec.seeds), f"fraction {frac} reported for every seed and dataset")
        print(f"fraction {frac}: mean held-out NDCG@10 "
              f"{statistics.mean(r['ndcg@10'] for r in rows if r['held_out']):.4f}")
    criterion.finish()


@pytest.mark.criterion(10, "doc length", 2.0)
def test_doc_length(criterion: Criterion):
    rng = np.random.default_rng(10)
    corpus = Corpus([Document(f"d{i}", "", " ".join(["w"] * int(rng.integers(0, 60)))) for i in range(80)])
    ok = True
    for _ in range(10):
        lists = []
        for qi in range(int(rng.integers(1, 8))):
            picks = rng.choice(80, int(rng.integers(1, 15)), replace=False)
            lists.append(RankedList(f"q{qi}", [(f"d{p}", 0.0) for p in picks], 15))
        pool = sorted(corpus[d].word_count for rl in lists for d in rl.doc_ids[:10])
        m = len(pool) // 2
        brute = pool[m] if len(pool) % 2 else (pool[m - 1] + pool[m]) / 2
        ok &= median_topk_doc_length(RunResult.from_lists("r", lists), corpus, 10) == brute
    criterion.check(ok, "matches brute force on 10 random runs")
    c = Corpus([Document(f"e{i}", "", " ".join(["w"] * n)) for i, n in enumerate([3, 9, 4, 10])])
    odd = median_topk_doc_length(RunResult.from_lists("r", [RankedList("q", [("e0", 1), ("e1", 1), ("e2", 1)], 10)]), c)
    even = median_topk_doc_length(RunResult.from_lists("r", [RankedList("q", [(f"e{i}", 1) for i in range(4)], 10)]), c)
    criterion.check(odd == 4.0 and even == 6.5, f"odd median {odd} = 4, even median {even} = 6.5 (mean of middle two)")
    criterion.finish()
