"""
BM25 as a lexical baseline
==========================

The synthetic queries name entities that appear verbatim in their target
documents, which is the easy case for term matching.
"""

from dualret.eval import RunResult, aggregate_reports, evaluate_run
from dualret.lexical import bm25_search, bm25_search_many, build_bm25_index
from dualret.synthetic import generate_benchmark

bench = generate_benchmark()

per_dataset = {}
for es in bench.eval_sets:
    index = build_bm25_index(es.corpus, k1=0.9, b=0.4)
    run = RunResult.from_lists(es.name, bm25_search_many(index, es.queries, 100), 100)
    per_dataset[es.name] = evaluate_run(run, es.qrels)

print(aggregate_reports(per_dataset, exclude="held_out").to_table())

# %%
# One query in detail.
es = bench.eval_set("held_out")
q = es.queries[0]
print("query:", q.text)
for doc_id, score in bm25_search(build_bm25_index(es.corpus), q.text, 3, q.id).hits:
    print(f"  {doc_id:8s} {score:.3f} grade={es.qrels.grade(q.id, doc_id)}")
