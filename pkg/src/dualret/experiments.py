"""Desk-scale experiment drivers: size sweep, stage ablation, data efficiency,
BM25 comparison and encode latency.

Every driver returns an :class:`ExperimentReport` whose rows are flat dicts,
written as CSV plus a gnuplot script for the size-vs-metric plot.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import encoder as enc
from .corpus import subsample_training_set
from .eval import RunResult, aggregate_reports, evaluate_run
from .index import build_store, search_batch
from .lexical import bm25_search_many, build_bm25_index
from .synthetic import Benchmark, SyntheticConfig, generate_benchmark
from .tokenizer import Vocab, build_vocab, encode_texts
from .trainer import StageSpec, TrainConfig, coerce_fields, read_key_values, run_multi_stage

logger = logging.getLogger(__name__)

EVAL_METRICS = ("ndcg@10", "recall@100", "mrr@10")


@dataclass
class SweepSpec:
    configs: dict[str, dict]  # name -> EncoderConfig fields other than vocab_size
    pretrain: TrainConfig
    finetune: TrainConfig
    benchmark: SyntheticConfig = SyntheticConfig()
    seeds: Sequence[int] = (0, 1, 2)
    max_vocab: int = 50000
    oov_buckets: int = 64
    threads: int = 1

    def __post_init__(self):
        dims = {c.get("bottleneck_dim", enc.EncoderConfig.bottleneck_dim) for c in self.configs.values()}
        if len(dims) > 1:
            raise ValueError(f"all configs in a sweep must share bottleneck_dim, got {sorted(dims)}")


@dataclass
class ExperimentReport:
    kind: str
    rows: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        cols: list[str] = []
        for r in self.rows:
            cols.extend(c for c in r if c not in cols)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, out_dir, include_timing: bool = False) -> list[Path]:
        """Write ``<kind>.csv`` (and a gnuplot script); timing columns are
        dropped unless requested so reports are byte-reproducible."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rep = self if include_timing else self.without_timing()
        paths = [out / f"{self.kind}.csv"]
        paths[0].write_text(rep.to_csv(), encoding="utf-8")
        if self.kind == "scaling":
            paths.append(out / "scaling.gp")
            paths[1].write_text(_GNUPLOT_SCALING, encoding="utf-8")
        return paths

    def without_timing(self) -> "ExperimentReport":
        rows = [{k: v for k, v in r.items() if not k.endswith("_seconds") and k != "timings_ms"} for r in self.rows]
        return ExperimentReport(self.kind, rows, self.notes)

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]


_GNUPLOT_SCALING = """set datafile separator ','
set key autotitle columnhead
set logscale x
set xlabel 'parameters'
set ylabel 'NDCG@10'
plot '< grep held_out scaling.csv' using 'params':'ndcg@10' with points title 'held-out', \\
     '< grep in_domain scaling.csv' using 'params':'ndcg@10' with points title 'in-domain'
"""


def desk_trend_spec(seeds: Sequence[int] = (0, 1, 2)) -> SweepSpec:
    """Two encoders of different size sharing one bottleneck, trained briefly on
    the default synthetic benchmark. Each seed takes a few seconds per config."""
    stage = dict(batch_size=32, temperature=0.01, init_lr=3e-3, query_max_len=16, doc_max_len=32)
    return SweepSpec(
        configs={
            "S": dict(model_dim=32, ffn_dim=64, num_layers=1, num_heads=2, bottleneck_dim=32),
            "L": dict(model_dim=64, ffn_dim=128, num_layers=2, num_heads=2, bottleneck_dim=32),
        },
        pretrain=TrainConfig(steps=400, **stage),
        finetune=TrainConfig(steps=200, **stage),
        seeds=tuple(seeds),
    )


def config_hash(obj) -> str:
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def prepare(spec: SweepSpec, seed: int) -> tuple[Benchmark, Vocab]:
    bench = generate_benchmark(dataclasses.replace(spec.benchmark, seed=seed))
    vocab = build_vocab(bench.texts(), spec.max_vocab, spec.oov_buckets)
    return bench, vocab


def make_config(spec: SweepSpec, name: str, vocab: Vocab) -> enc.EncoderConfig:
    fields = dict(spec.configs[name])
    fields.setdefault("max_len", max(spec.pretrain.doc_max_len, spec.finetune.doc_max_len,
                                     spec.pretrain.query_max_len, spec.finetune.query_max_len))
    return enc.EncoderConfig(vocab_size=vocab.size, **fields)


def encode_all(params, config, vocab, texts, max_len, batch_size=256, threads=1) -> np.ndarray:
    ids = encode_texts(vocab, texts, max_len)
    chunks = [ids[i: i + batch_size] for i in range(0, len(ids), batch_size)]

    def one(chunk):
        return enc.encode_batch(params, config, enc.trim_padding(chunk))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(one, chunks))
    else:
        outs = [one(c) for c in chunks]
    return np.concatenate(outs) if outs else np.zeros((0, config.bottleneck_dim), np.float32)


def evaluate_dense(params, config, vocab, bench: Benchmark, train_cfg: TrainConfig, k: int = 100,
                   threads: int = 1) -> dict[str, dict[str, float]]:
    out = {}
    for es in bench.eval_sets:
        docs = encode_all(params, config, vocab, [d.full_text for d in es.corpus], train_cfg.doc_max_len,
                          threads=threads)
        store = build_store(docs, es.corpus.ids)
        qv = encode_all(params, config, vocab, [q.text for q in es.queries], train_cfg.query_max_len,
                        threads=threads)
        lists = search_batch(store, qv, k, [q.id for q in es.queries], threads=threads)
        out[es.name] = evaluate_run(RunResult.from_lists(es.name, lists, k), es.qrels, EVAL_METRICS)
    return out


def evaluate_bm25(bench: Benchmark, k: int = 100) -> dict[str, dict[str, float]]:
    out = {}
    for es in bench.eval_sets:
        index = build_bm25_index(es.corpus)
        run = RunResult.from_lists(es.name, bm25_search_many(index, es.queries, k), k)
        out[es.name] = evaluate_run(run, es.qrels, EVAL_METRICS)
    return out


def _train(spec: SweepSpec, config, vocab, bench, seed, pretrain_steps=None, finetune_steps=None,
           finetune_set=None):
    pt_cfg = dataclasses.replace(spec.pretrain, seed=seed)
    ft_cfg = dataclasses.replace(spec.finetune, seed=seed + 1)
    if pretrain_steps is not None:
        pt_cfg = dataclasses.replace(pt_cfg, steps=pretrain_steps)
    if finetune_steps is not None:
        ft_cfg = dataclasses.replace(ft_cfg, steps=finetune_steps)
    params = enc.init_params(config, seed)
    result = run_multi_stage(
        StageSpec("pretrain", bench.pretrain, pt_cfg),
        StageSpec("finetune", finetune_set if finetune_set is not None else bench.finetune, ft_cfg),
        params, config, vocab,
    )
    return result, pt_cfg, ft_cfg


def _metric_rows(base: dict, metrics: dict[str, dict[str, float]], bench: Benchmark) -> list[dict]:
    rows = []
    for es in bench.eval_sets:
        row = dict(base)
        row["dataset"] = es.name
        row["held_out"] = int(es.held_out)
        row.update(metrics[es.name])
        rows.append(row)
    return rows


def run_scaling_sweep(spec: SweepSpec) -> ExperimentReport:
    """Train every config with identical data, steps and seeds; evaluate each."""
    if len(spec.configs) < 2:
        raise ValueError("a sweep needs at least two configs")
    report = ExperimentReport("scaling")
    for seed in spec.seeds:
        bench, vocab = prepare(spec, seed)
        if not any(es.held_out for es in bench.eval_sets):
            raise ValueError("a sweep needs a held-out dataset")
        for name in spec.configs:
            config = make_config(spec, name, vocab)
            t0 = time.perf_counter()
            result, _, ft_cfg = _train(spec, config, vocab, bench, seed)
            train_s = time.perf_counter() - t0
            metrics = evaluate_dense(result.final, config, vocab, bench, ft_cfg, threads=spec.threads)
            base = {"config": name, "seed": seed, "params": enc.count_params(config),
                    "bottleneck_dim": config.bottleneck_dim, "train_seconds": train_s}
            report.rows.extend(_metric_rows(base, metrics, bench))
    return report


ABLATION_ARMS = ("two-stage", "finetune-only", "pretrain-only")


def run_ablation(spec: SweepSpec, config_name: Optional[str] = None, arms=ABLATION_ARMS) -> ExperimentReport:
    """Both stages, fine-tune only and pretrain only.

    Arms differ only in stage step counts; the stage config hashes are recorded
    with the steps field blanked so that can be checked.
    """
    name = config_name or next(iter(spec.configs))
    report = ExperimentReport("ablation")
    for seed in spec.seeds:
        bench, vocab = prepare(spec, seed)
        config = make_config(spec, name, vocab)
        for arm in arms:
            pt_steps = 0 if arm == "finetune-only" else None
            ft_steps = 0 if arm == "pretrain-only" else None
            result, pt_cfg, ft_cfg = _train(spec, config, vocab, bench, seed, pt_steps, ft_steps)
            metrics = evaluate_dense(result.final, config, vocab, bench, ft_cfg, threads=spec.threads)
            base = {
                "arm": arm, "config": name, "seed": seed,
                "pretrain_steps": pt_cfg.steps, "finetune_steps": ft_cfg.steps,
                "config_hash": config_hash({
                    "encoder": config.to_dict(),
                    "pretrain": {**dataclasses.asdict(pt_cfg), "steps": None},
                    "finetune": {**dataclasses.asdict(ft_cfg), "steps": None},
                }),
            }
            report.rows.extend(_metric_rows(base, metrics, bench))
    return report


def run_data_efficiency(fractions: Sequence[float], spec: SweepSpec, config_name: Optional[str] = None,
                        with_pretrain: bool = True) -> ExperimentReport:
    """Fine-tune on a seeded subsample of the training queries for each fraction."""
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fractions must lie in (0, 1], got {f}")
    name = config_name or next(iter(spec.configs))
    report = ExperimentReport("data_efficiency")
    for seed in spec.seeds:
        bench, vocab = prepare(spec, seed)
        config = make_config(spec, name, vocab)
        for frac in fractions:
            subset = subsample_training_set(bench.finetune, frac, seed)
            ft_batch = min(spec.finetune.batch_size, len(subset))
            sub_spec = dataclasses.replace(spec, finetune=dataclasses.replace(spec.finetune, batch_size=ft_batch))
            result, _, ft_cfg = _train(sub_spec, config, vocab, bench, seed,
                                       pretrain_steps=None if with_pretrain else 0, finetune_set=subset)
            metrics = evaluate_dense(result.final, config, vocab, bench, ft_cfg, threads=spec.threads)
            base = {"fraction": frac, "config": name, "seed": seed, "train_examples": len(subset),
                    "total_examples": len(bench.finetune), "finetune_batch": ft_batch}
            logger.info("fraction %.3g keeps %d of %d examples", frac, len(subset), len(bench.finetune))
            report.rows.extend(_metric_rows(base, metrics, bench))
    return report


def run_bm25_comparison(spec: SweepSpec) -> ExperimentReport:
    """NDCG@10 per dataset for BM25 and every dense config, plus win counts."""
    report = ExperimentReport("bm25_comparison")
    wins: dict[str, int] = {}
    for seed in spec.seeds:
        bench, vocab = prepare(spec, seed)
        bm25 = evaluate_bm25(bench)
        for es in bench.eval_sets:
            report.rows.append({"system": "BM25", "seed": seed, "dataset": es.name,
                                "ndcg@10": bm25[es.name]["ndcg@10"]})
        for name in spec.configs:
            config = make_config(spec, name, vocab)
            result, _, ft_cfg = _train(spec, config, vocab, bench, seed)
            dense = evaluate_dense(result.final, config, vocab, bench, ft_cfg, threads=spec.threads)
            for es in bench.eval_sets:
                d = dense[es.name]["ndcg@10"]
                report.rows.append({"system": name, "seed": seed, "dataset": es.name, "ndcg@10": d})
                wins[name] = wins.get(name, 0) + int(d > bm25[es.name]["ndcg@10"])
    report.notes["dense_wins_over_bm25"] = wins
    return report


def bench_encode_latency(configs: dict[str, enc.EncoderConfig], batch_size: int = 1, input_len: int = 128,
                         trials: int = 10, warmup: int = 2, seed: int = 0) -> ExperimentReport:
    """Median wall-clock of one forward pass per config; warmup runs are discarded."""
    if trials < 3:
        raise ValueError("trials must be >= 3")
    report = ExperimentReport("latency")
    rng = np.random.default_rng(seed)
    for name, config in configs.items():
        params = enc.init_params(config, seed)
        ids = rng.integers(1, config.vocab_size, size=(batch_size, min(input_len, config.max_len)))
        for _ in range(warmup):
            enc.encode_batch(params, config, ids)
        timings = []
        for _ in range(trials):
            t0 = time.perf_counter()
            enc.encode_batch(params, config, ids)
            timings.append((time.perf_counter() - t0) * 1e3)
        report.rows.append({"config": name, "params": enc.count_params(config),
                            "median_ms": statistics.median(timings), "timings_ms": timings})
    order = sorted(report.rows, key=lambda r: r["params"])
    report.notes["latency_monotone_in_params"] = all(
        a["median_ms"] <= b["median_ms"] for a, b in zip(order, order[1:]))
    return report


def summarize(report: ExperimentReport, group_by: str, metric: str = "ndcg@10") -> str:
    """Mean of ``metric`` per (group, dataset) over seeds, as an eval-style table."""
    cells: dict[str, dict[str, list[float]]] = {}
    for r in report.rows:
        if metric in r:
            cells.setdefault(str(r[group_by]), {}).setdefault(r["dataset"], []).append(r[metric])
    per = {g: {ds: float(np.mean(v)) for ds, v in d.items()} for g, d in cells.items()}
    # rows = groups, columns = datasets
    return aggregate_reports({g: v for g, v in per.items()}).to_table()


def load_sweep_spec(path) -> tuple[str, SweepSpec, dict]:
    """Read an experiment spec file.

    Sections: ``[experiment]`` (kind, seeds, fractions, config, max_vocab,
    oov_buckets), ``[benchmark]`` (SyntheticConfig fields), ``[pretrain]`` and
    ``[finetune]`` (TrainConfig fields) and one ``[config NAME]`` per encoder.
    """
    sections = read_key_values(path)
    exp = dict(sections.get("experiment", {}))
    kind = exp.pop("kind", "scaling")
    extra = {}
    seeds = tuple(int(s) for s in exp.pop("seeds", "0,1,2").split(","))
    for key in ("fractions",):
        if key in exp:
            extra[key] = [float(x) for x in exp.pop(key).split(",")]
    if "config" in exp:
        extra["config"] = exp.pop("config")
    max_vocab = int(exp.pop("max_vocab", 50000))
    oov = int(exp.pop("oov_buckets", 64))
    if exp:
        raise KeyError(f"unknown key {next(iter(exp))!r} in [experiment]")
    configs = {}
    enc_fields = {f.name: f.type for f in dataclasses.fields(enc.EncoderConfig)}
    for sec, vals in sections.items():
        if sec.startswith("config "):
            cfg = {}
            for k, v in vals.items():
                if k not in enc_fields or k == "vocab_size":
                    raise KeyError(f"unknown key {k!r} in [{sec}]")
                cfg[k] = v if k == "arch" else int(v)
            configs[sec.split(None, 1)[1]] = cfg
    spec = SweepSpec(
        configs=configs,
        pretrain=coerce_fields(TrainConfig, sections.get("pretrain", {})),
        finetune=coerce_fields(TrainConfig, sections.get("finetune", {})),
        benchmark=coerce_fields(SyntheticConfig, sections.get("benchmark", {})),
        seeds=seeds, max_vocab=max_vocab, oov_buckets=oov,
    )
    return kind, spec, extra
