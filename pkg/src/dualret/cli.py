"""Command-line front end.

Data goes to stdout and logs to stderr. Failures print a single
``error: <Kind>: <message>`` line and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus, load_corpus, load_qrels, load_queries, load_training_set
from .eval import aggregate_reports, evaluate_run, format_run_lines, read_run
from .index import EmbeddingStore, IvfIndex, build_ivf, build_store, search_batch
from .tokenizer import Vocab, build_vocab, encode_texts
from .trainer import StageSpec, TrainConfig, coerce_fields, read_key_values, train_stage

logger = logging.getLogger("dualret")

ENV_PREFIX = "DUALRET_"


def encode_corpus(params, config, vocab: Vocab, corpus: Corpus, max_len: int, batch_size: int, out_path,
                  shard_size: int = 4096, threads: int = 1) -> EmbeddingStore:
    """Encode every document in corpus order and write an embedding store.

    Work is split into shards saved under ``<out>.shards/``; an interrupted run
    picks up from the last finished shard. The shard directory is removed once
    the store is written.
    """
    if config.vocab_size != vocab.size:
        raise ValueError(f"checkpoint expects {config.vocab_size} token ids but vocab has {vocab.size}")
    if max_len > config.max_len:
        raise ValueError(f"max_len {max_len} exceeds the encoder's max_len {config.max_len}")
    from .experiments import encode_all

    out_path = Path(out_path)
    shard_dir = out_path.with_name(out_path.name + ".shards")
    shard_dir.mkdir(parents=True, exist_ok=True)
    texts = [d.full_text for d in corpus]
    blocks = []
    for s, start in enumerate(range(0, len(texts), shard_size)):
        shard = shard_dir / f"{s:05d}.npy"
        if shard.exists():
            blocks.append(np.load(shard))
            continue
        emb = encode_all(params, config, vocab, texts[start: start + shard_size], max_len, batch_size, threads)
        tmp = shard.with_suffix(".tmp.npy")
        np.save(tmp, emb)
        os.replace(tmp, shard)
        blocks.append(emb)
        logger.info("encoded shard %d (%d docs)", s, len(emb))
    matrix = np.concatenate(blocks) if blocks else np.zeros((0, config.bottleneck_dim), np.float32)
    store = build_store(matrix, corpus.ids)
    store.save(out_path)
    shutil.rmtree(shard_dir)
    return store


def _write_meta(store_path, **kv):
    with open(f"{store_path}.meta", "w", encoding="utf-8") as fh:
        for k, v in kv.items():
            fh.write(f"{k}={v}\n")


def _read_meta(store_path) -> dict:
    path = f"{store_path}.meta"
    if not os.path.exists(path):
        return {}
    return read_key_values(path)[""]


def _env_path(value, name):
    return value if value is not None else os.environ.get(ENV_PREFIX + name)


def _parse_sets(pairs):
    out: dict[str, dict[str, str]] = {}
    for item in pairs or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def _encoder_config(values: dict, vocab_size: int) -> enc.EncoderConfig:
    fields = {f.name for f in dataclasses.fields(enc.EncoderConfig)}
    kw = {}
    for k, v in values.items():
        if k not in fields or k == "vocab_size":
            raise KeyError(f"unknown key {k!r} for EncoderConfig")
        kw[k] = v if k == "arch" else int(v)
    return enc.EncoderConfig(vocab_size=vocab_size, **kw)


def cmd_build_vocab(args):
    texts = []
    for path in args.corpus:
        texts.extend(d.full_text for d in load_corpus(path))
    for path in args.queries or []:
        texts.extend(q.text for q in load_queries(path))
    vocab = build_vocab(texts, args.max_vocab, args.oov_buckets)
    vocab.save(args.out)
    logger.info("vocab: %d words + %d oov buckets -> %s", vocab.num_words, vocab.oov_buckets, args.out)


def cmd_train(args):
    vocab = Vocab.load(args.vocab)
    sections = read_key_values(args.config) if args.config else {}
    for section, vals in _parse_sets(args.set).items():
        if section not in ("train", "encoder"):
            raise KeyError(f"unknown section {section!r} in --set (use train. or encoder.)")
        sections.setdefault(section, {}).update(vals)
    unknown = set(sections) - {"", "train", "encoder"}
    if unknown or sections.get(""):
        bad = sorted(unknown)[0] if unknown else sorted(sections[""])[0]
        raise KeyError(f"unknown key or section {bad!r} in stage config")
    train_cfg = coerce_fields(TrainConfig, sections.get("train", {}))
    train_cfg = dataclasses.replace(train_cfg, seed=args.seed)

    corpus = load_corpus(args.corpus)
    queries = load_queries(args.queries)
    examples = load_training_set(args.pairs, corpus, queries, args.negatives)

    if args.init and args.init != "fresh":
        params, config = load_checkpoint(args.init)
        if sections.get("encoder"):
            raise ValueError("encoder settings cannot be changed when initialising from a checkpoint")
    else:
        config = _encoder_config(sections.get("encoder", {}), vocab.size)
        params = enc.init_params(config, args.seed)
    spec = StageSpec(args.stage, examples, train_cfg, params, Path(args.out), Path(args.log) if args.log else None)
    _, reports = train_stage(spec, None, config, vocab)
    for rep in reports:
        print(rep.to_line())


def cmd_encode(args):
    params, config = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    corpus = load_corpus(args.corpus)
    encode_corpus(params, config, vocab, corpus, args.max_len, args.batch, args.out, args.shard_size, args.threads)
    _write_meta(args.out, checkpoint=os.path.abspath(args.checkpoint), vocab=os.path.abspath(args.vocab))
    logger.info("encoded %d documents -> %s", len(corpus), args.out)


def cmd_index(args):
    store = EmbeddingStore.load(args.store)
    index = build_ivf(store, args.clusters, args.seed, args.iters)
    index.save(args.out)
    logger.info("ivf: %d clusters over %d rows -> %s", index.n_clusters, len(store), args.out)


def cmd_search(args):
    store_path = _env_path(args.store, "STORE")
    if store_path is None:
        raise ValueError("--store is required")
    store = EmbeddingStore.load(store_path)
    meta = _read_meta(store_path)
    ckpt = args.checkpoint or meta.get("checkpoint")
    vocab_path = args.vocab or meta.get("vocab")
    if not ckpt or not vocab_path:
        raise ValueError("no checkpoint/vocab given and the store has no .meta sidecar")
    params, config = load_checkpoint(ckpt)
    vocab = Vocab.load(vocab_path)
    if args.query is not None:
        qids, texts = ["q0"], [args.query]
    else:
        qs = load_queries(args.queries)
        qids, texts = [q.id for q in qs], [q.text for q in qs]
    ids = encode_texts(vocab, texts, args.max_len)
    qv = enc.encode_batch(params, config, enc.trim_padding(ids)) if len(ids) else np.zeros((0, store.dim))
    index = IvfIndex.load(args.ivf) if args.ivf else None
    lists = search_batch(store, qv, args.k, qids, threads=args.threads, index=index, n_probe=args.n_probe)
    sys.stdout.write(format_run_lines(lists, args.tag))


def cmd_eval(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    qrels = load_qrels(args.qrels)
    per_dataset = {}
    names = args.dataset or []
    for i, path in enumerate(args.run):
        name = names[i] if i < len(names) else Path(path).stem
        run = read_run(path, name)
        if args.depth is None:
            # trust the file: a short list may just mean a small corpus
            from .eval import parse_metric

            run.k_max = max([run.k_max] + [parse_metric(m)[1] for m in metrics])
        else:
            run.k_max = args.depth
        per_dataset[name] = evaluate_run(run, qrels, metrics, gain=args.gain, min_grade=args.min_grade)
    report = aggregate_reports(per_dataset, args.exclude)
    sys.stdout.write(report.to_table())
    if args.report:
        Path(args.report).write_text(report.to_table(), encoding="utf-8")
        Path(str(args.report) + ".kv").write_text(report.to_key_values(), encoding="utf-8")


def cmd_experiment(args):
    from . import experiments as ex

    kind, spec, extra = ex.load_sweep_spec(args.spec)
    if args.seed_given:
        spec = dataclasses.replace(spec, seeds=(args.seed,))
    spec = dataclasses.replace(spec, threads=args.threads)
    if kind == "scaling":
        report = ex.run_scaling_sweep(spec)
    elif kind == "ablation":
        report = ex.run_ablation(spec, extra.get("config"))
    elif kind == "data_efficiency":
        report = ex.run_data_efficiency(extra.get("fractions", [0.1, 1.0]), spec, extra.get("config"))
    elif kind == "bm25":
        report = ex.run_bm25_comparison(spec)
    else:
        raise ValueError(f"unknown experiment kind {kind!r}")
    for p in report.write(args.out):
        logger.info("wrote %s", p)
    group = {"scaling": "config", "ablation": "arm", "data_efficiency": "fraction", "bm25_comparison": "system"}
    sys.stdout.write(ex.summarize(report, group[report.kind]))


def cmd_bench(args):
    from .experiments import bench_encode_latency

    sizes = [int(s) for s in args.sizes.split(",")]
    configs = {
        f"desk-{s}": enc.EncoderConfig.desk_scale(s, args.vocab_size, args.bottleneck_dim,
                                                  max_len=max(args.input_len, 1))
        for s in sizes
    }
    report = bench_encode_latency(configs, args.batch_size, args.input_len, args.trials, args.warmup, args.seed)
    print("config\tparams\tmedian_ms")
    for r in report.rows:
        print(f"{r['config']}\t{r['params']}\t{r['median_ms']:.3f}")
    logger.info("latency monotone in parameter count: %s", report.notes["latency_monotone_in_params"])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualret", description="Dense retrieval toolkit")
    p.add_argument("--seed", type=int, default=None, help="single source of randomness (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for encode/search")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-vocab", help="build a word vocabulary from corpora")
    s.add_argument("--corpus", action="append", required=True)
    s.add_argument("--queries", action="append")
    s.add_argument("--max-vocab", type=int, default=50000)
    s.add_argument("--oov-buckets", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    for name, help_text in (("train", "run one training stage"), ("pretrain", "train --stage pretrain"),
                            ("finetune", "train --stage finetune")):
        s = sub.add_parser(name, help=help_text)
        if name == "train":
            s.add_argument("--stage", choices=("pretrain", "finetune"), default="finetune")
        else:
            s.set_defaults(stage=name)
        s.add_argument("--vocab", required=True)
        s.add_argument("--corpus", required=True)
        s.add_argument("--queries", required=True)
        s.add_argument("--pairs", required=True)
        s.add_argument("--negatives")
        s.add_argument("--config", help="stage file with [train] and [encoder] key=value sections")
        s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        s.add_argument("--init", default="fresh", help="checkpoint to start from, or 'fresh'")
        s.add_argument("--out", required=True)
        s.add_argument("--log")
        s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", help="encode a corpus into an embedding store")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--max-len", type=int, default=512)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--shard-size", type=int, default=4096)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("index", help="build an IVF index over a store")
    s.add_argument("--store", required=True)
    s.add_argument("--clusters", type=int, required=True)
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("search", help="search a store; prints a TREC run")
    s.add_argument("--store")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--query")
    g.add_argument("--queries")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--checkpoint")
    s.add_argument("--vocab")
    s.add_argument("--max-len", type=int, default=64)
    s.add_argument("--ivf")
    s.add_argument("--n-probe", type=int, default=8)
    s.add_argument("--tag", default="dualret")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("eval", help="score TREC runs against qrels")
    s.add_argument("--run", action="append", required=True)
    s.add_argument("--dataset", action="append")
    s.add_argument("--qrels", required=True)
    s.add_argument("--metrics", default="ndcg@10,recall@100,mrr@10")
    s.add_argument("--gain", choices=("linear", "exponential"), default="linear")
    s.add_argument("--min-grade", type=int, default=1)
    s.add_argument("--depth", type=int, help="depth the runs were retrieved to")
    s.add_argument("--exclude", help="dataset left out of the second average")
    s.add_argument("--report", help="also write the table here (and key=value to <report>.kv)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", help="run an experiment spec file")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("bench", help="encode latency per desk-scale size")
    s.add_argument("--sizes", default="0,1,2,3")
    s.add_argument("--vocab-size", type=int, default=32000)
    s.add_argument("--bottleneck-dim", type=int, default=64)
    s.add_argument("--batch-size", type=int, default=1)
    s.add_argument("--input-len", type=int, default=128)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--warmup", type=int, default=2)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001 - surfaced as a one-line error
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
