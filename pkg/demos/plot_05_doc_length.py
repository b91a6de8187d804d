"""
Length of retrieved documents
=============================

Compare the median word count of the top-10 documents that BM25 and an
untrained encoder return, on a corpus where document lengths vary.
"""

import numpy as np

from dualret import encoder as enc
from dualret.corpus import Corpus, Document, Query
from dualret.eval import RunResult, median_topk_doc_length
from dualret.experiments import encode_all
from dualret.index import build_store, search_batch
from dualret.lexical import bm25_search_many, build_bm25_index
from dualret.tokenizer import build_vocab

rng = np.random.default_rng(0)
words = [f"w{i}" for i in range(200)]
corpus = Corpus([
    Document(f"d{i}", "", " ".join(rng.choice(words, int(rng.integers(5, 120)))))
    for i in range(300)
])
queries = [Query(f"q{i}", " ".join(rng.choice(words, 3))) for i in range(40)]
lengths = [d.word_count for d in corpus]
print(f"corpus median length {np.median(lengths):.0f} words")

# %%
# BM25 normalises term frequency by length, yet longer documents still
# contain more distinct terms and tend to match more queries.
bm25 = RunResult.from_lists("bm25", bm25_search_many(build_bm25_index(corpus), queries, 10), 10)
print(f"BM25 top-10 median length {median_topk_doc_length(bm25, corpus):.1f}")

# %%
# A mean-pooled encoder's output does not grow with length.
vocab = build_vocab([d.text for d in corpus], 1000)
config = enc.EncoderConfig(vocab_size=vocab.size, model_dim=16, ffn_dim=32, num_layers=1, num_heads=2,
                           bottleneck_dim=16, max_len=128)
params = enc.init_params(config, 0)
store = build_store(encode_all(params, config, vocab, [d.text for d in corpus], 128), corpus.ids)
qv = encode_all(params, config, vocab, [q.text for q in queries], 16)
dense = RunResult.from_lists("dense", search_batch(store, qv, 10, [q.id for q in queries]), 10)
print(f"dense top-10 median length {median_topk_doc_length(dense, corpus):.1f}")
