import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import unit_rows
from dualret.index import (
    EmbeddingStore, IvfIndex, build_ivf, build_store, recall_vs_exact, search_batch, search_exact, search_ivf,
)

FIXTURES = Path(__file__).parent / "fixtures"


def naive_topk(matrix, ids, q, k):
    """Full O(N d) scan in float64 followed by a full sort on (score desc, id asc)."""
    scores = [(-float(np.dot(row.astype(np.float64), q.astype(np.float64))), ids[i]) for i, row in enumerate(matrix)]
    return [doc_id for _, doc_id in sorted(scores)[:k]]


@pytest.fixture(scope="module")
def random_store():
    rng = np.random.default_rng(0)
    docs = unit_rows(rng, 1000, 16, np.float32)
    ids = [f"doc{i}" for i in rng.permutation(1000)]
    return build_store(docs, ids), unit_rows(rng, 50, 16, np.float32)


class TestStore:
    def test_shape(self):
        s = build_store(np.eye(3, dtype=np.float32), ["a", "b", "c"])
        assert len(s) == 3 and s.dim == 3

    def test_nan_row(self):
        m = np.eye(3, dtype=np.float32)
        m[1, 1] = np.nan
        with pytest.raises(ValueError, match="row 1"):
            build_store(m, ["a", "b", "c"])

    def test_duplicate_id(self):
        with pytest.raises(ValueError, match="'a'"):
            build_store(np.eye(2), ["a", "a"])

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            build_store(np.eye(2), ["a"])

    def test_renormalises(self):
        s = build_store(np.array([[3.0, 4.0]]), ["a"])
        np.testing.assert_allclose(s.matrix, [[0.6, 0.8]], atol=1e-7)

    def test_block_stream(self):
        s = build_store([np.eye(4)[:2], np.eye(4)[2:]], list("abcd"))
        assert len(s) == 4

    def test_save_load_bitwise(self, tmp_path, random_store):
        store, _ = random_store
        store.save(tmp_path / "s.store")
        again = EmbeddingStore.load(tmp_path / "s.store")
        assert again.matrix.tobytes() == store.matrix.tobytes()
        assert again.doc_ids == store.doc_ids
        assert (tmp_path / "s.store").read_bytes()[:4] == b"DRES"


class TestExact:
    def test_self_retrieval(self, random_store):
        store, _ = random_store
        hit = search_exact(store, store.matrix[17], 5).hits[0]
        assert hit[0] == store.doc_ids[17]
        assert hit[1] == pytest.approx(1.0, abs=1e-6)

    def test_k_larger_than_n(self):
        s = build_store(np.eye(3), ["a", "b", "c"])
        assert len(search_exact(s, [1, 0, 0], 10).hits) == 3

    def test_empty_store(self):
        s = build_store(np.zeros((0, 4)), [])
        assert search_exact(s, np.ones(4) / 2, 3).hits == []

    def test_matches_naive(self, random_store):
        store, queries = random_store
        for q in queries:
            assert search_exact(store, q, 10).doc_ids == naive_topk(store.matrix, store.doc_ids, q, 10)

    @pytest.mark.parametrize("block", [1, 7, 100, 4096])
    def test_block_size_invariant(self, random_store, block):
        store, queries = random_store
        assert search_exact(store, queries[0], 10, block_rows=block) == search_exact(store, queries[0], 10)

    def test_ties_by_ascending_id(self):
        s = build_store(np.array([[1.0, 0], [1.0, 0], [0, 1.0], [1.0, 0]]), ["z", "b", "c", "m"])
        assert search_exact(s, [1, 0], 3, block_rows=2).doc_ids == ["b", "m", "z"]

    def test_full_ordering_consistent(self, random_store):
        store, queries = random_store
        hits = search_exact(store, queries[3], len(store)).hits
        for (d1, s1), (d2, s2) in zip(hits, hits[1:]):
            assert s1 > s2 or (s1 == s2 and d1 < d2)

    def test_threads_invariant(self, random_store):
        store, queries = random_store
        assert search_batch(store, queries, 10, threads=1) == search_batch(store, queries, 10, threads=4)


class TestIvf:
    def test_one_cluster(self, random_store):
        store, _ = random_store
        idx = build_ivf(store, 1, seed=0)
        assert len(idx.postings) == 1 and len(idx.postings[0]) == len(store)

    def test_each_row_own_cluster(self):
        store = build_store(unit_rows(np.random.default_rng(1), 12, 4), [str(i) for i in range(12)])
        idx = build_ivf(store, 12, seed=0)
        assert sorted(len(p) for p in idx.postings) == [1] * 12

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            build_ivf(build_store(np.eye(3), list("abc")), 4)

    def test_deterministic_and_partition(self, random_store):
        store, _ = random_store
        a, b = build_ivf(store, 16, seed=5), build_ivf(store, 16, seed=5)
        assert all(np.array_equal(x, y) for x, y in zip(a.postings, b.postings))
        rows = np.sort(np.concatenate(a.postings))
        assert np.array_equal(rows, np.arange(len(store)))

    def test_full_probe_equals_exact(self, random_store):
        store, queries = random_store
        idx = build_ivf(store, 16, seed=0)
        for q in queries:
            assert search_ivf(idx, store, q, 10, 16) == search_exact(store, q, 10)

    def test_query_on_centroid(self, random_store):
        store, _ = random_store
        idx = build_ivf(store, 8, seed=0)
        c = 3
        top = search_ivf(idx, store, idx.centroids[c], 1, 1).doc_ids[0]
        assert store.doc_ids.index(top) in set(idx.postings[c].tolist())

    def test_bad_probe(self, random_store):
        store, queries = random_store
        idx = build_ivf(store, 4, seed=0)
        with pytest.raises(ValueError):
            search_ivf(idx, store, queries[0], 5, 5)

    def test_recall_monotone_in_probes(self, random_store):
        store, queries = random_store
        idx = build_ivf(store, 16, seed=2)
        for q in queries[:20]:
            exact = search_exact(store, q, 10)
            recalls = [recall_vs_exact(search_ivf(idx, store, q, 10, p), exact) for p in range(1, 17)]
            assert all(b >= a for a, b in zip(recalls, recalls[1:]))
            assert recalls[-1] == 1.0

    def test_save_load(self, tmp_path, random_store):
        store, _ = random_store
        idx = build_ivf(store, 8, seed=0)
        idx.save(tmp_path / "i.npz")
        again = IvfIndex.load(tmp_path / "i.npz")
        assert np.array_equal(again.centroids, idx.centroids)
        assert all(np.array_equal(a, b) for a, b in zip(again.postings, idx.postings))

    def test_calibrated_recall(self):
        from fixtures.make_ivf_calibration import measure

        frozen = json.loads((FIXTURES / "ivf_calibration.json").read_text())
        assert measure() >= frozen["mean_recall"] - 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_dot_ranking_equals_cosine_ranking(seed, k):
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((30, 5))
    store = build_store(raw, [f"d{i:02d}" for i in range(30)])
    q = unit_rows(rng, 1, 5)[0]
    cos = raw @ q / np.linalg.norm(raw, axis=1)
    got = search_exact(store, q, k).doc_ids
    want = [f"d{i:02d}" for i in sorted(range(30), key=lambda i: (-cos[i], i))[:k]]
    assert got == want


def test_ivf_file_checks(tmp_path, random_store):
    from dualret.checkpoint import CorruptFileError, UnsupportedVersionError

    store, _ = random_store
    idx = build_ivf(store, 4, seed=0)
    idx.save(tmp_path / "i.npz")
    with np.load(tmp_path / "i.npz") as z:
        parts = dict(z)
    np.savez(tmp_path / "v2.npz", **{**parts, "version": np.uint32(2)})
    with pytest.raises(UnsupportedVersionError):
        IvfIndex.load(tmp_path / "v2.npz")
    np.savez(tmp_path / "plain.npz", centroids=idx.centroids)
    with pytest.raises(CorruptFileError):
        IvfIndex.load(tmp_path / "plain.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(CorruptFileError):
        IvfIndex.load(tmp_path / "junk.npz")
