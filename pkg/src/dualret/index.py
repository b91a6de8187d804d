"""Embedding store with exact (blocked scan) and IVF top-k search.

Scores are float32 dot products; rows are unit-norm, so ranking by dot product
is ranking by cosine. Every ranking breaks score ties by ascending doc id, which
makes results independent of block size, thread count and probe order.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import CorruptFileError, UnsupportedVersionError, _Reader, _text

STORE_MAGIC = b"DRES"
STORE_VERSION = 1
IVF_MAGIC = b"DRIV"
IVF_VERSION = 1
DEFAULT_BLOCK_ROWS = 4096


@dataclass
class RankedList:
    query_id: str
    hits: list[tuple[str, float]]
    k: int

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.hits]


class EmbeddingStore:
    def __init__(self, matrix, doc_ids, renormalize: bool = True):
        matrix = np.asarray(matrix, dtype=np.float32)
        doc_ids = [str(d) for d in doc_ids]
        if matrix.ndim != 2:
            raise ValueError(f"expected a 2-d matrix, got shape {matrix.shape}")
        if matrix.shape[0] != len(doc_ids):
            raise ValueError(f"{matrix.shape[0]} rows but {len(doc_ids)} doc ids")
        if len(set(doc_ids)) != len(doc_ids):
            seen = set()
            dup = next(d for d in doc_ids if d in seen or seen.add(d))
            raise ValueError(f"duplicate doc id {dup!r}")
        bad = ~np.isfinite(matrix).all(1)
        if bad.any():
            raise ValueError(f"non-finite values in row {int(np.argmax(bad))} ({doc_ids[int(np.argmax(bad))]!r})")
        if renormalize and len(matrix):
            norms = np.linalg.norm(matrix, axis=1, keepdims=True)
            if (norms == 0).any():
                raise ValueError(f"zero vector in row {int(np.argmin(norms))}")
            matrix = (matrix / norms).astype(np.float32)
        self.matrix = np.ascontiguousarray(matrix)
        self.doc_ids = doc_ids
        # position of each row's id in ascending id order; used as the tie-break key
        self._id_rank = np.empty(len(doc_ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(doc_ids, dtype=object), kind="stable")] = np.arange(len(doc_ids))

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path) -> None:
        n, d = self.matrix.shape
        parts = [STORE_MAGIC, struct.pack("<IQI", STORE_VERSION, n, d)]
        parts.extend(_text(i) for i in self.doc_ids)
        parts.append(np.ascontiguousarray(self.matrix, dtype="<f4").tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            r = _Reader(fh.read(), path)
        r.header(STORE_MAGIC, STORE_VERSION)
        n = r.u64()
        d = r.u32()
        ids = [r.text() for _ in range(n)]
        matrix = np.frombuffer(r.take(4 * n * d), dtype="<f4").reshape(n, d).astype(np.float32)
        r.done()
        return cls(matrix, ids, renormalize=False)


def build_store(embeddings, doc_ids) -> EmbeddingStore:
    """``embeddings`` is a matrix or an iterable of row blocks."""
    if not isinstance(embeddings, np.ndarray):
        blocks = [np.atleast_2d(np.asarray(b, dtype=np.float32)) for b in embeddings]
        embeddings = np.concatenate(blocks) if blocks else np.zeros((0, 0), dtype=np.float32)
    return EmbeddingStore(embeddings, list(doc_ids))


def _row_dots(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Per-row reduction whose value does not depend on which other rows are
    # present, so exact and IVF scans produce bitwise-equal scores.
    return np.multiply(rows, q).sum(axis=1, dtype=np.float32)


def _top_candidates(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top-k scores, plus anything tied with the k-th."""
    if len(scores) <= k:
        return np.arange(len(scores))
    part = np.argpartition(-scores, k - 1)[:k]
    kth = scores[part].min()
    return np.flatnonzero(scores >= kth)


def _ranked(store, rows: np.ndarray, scores: np.ndarray, k: int, query_id: str) -> RankedList:
    order = np.lexsort((store._id_rank[rows], -scores))[:k]
    return RankedList(query_id, [(store.doc_ids[rows[i]], float(scores[i])) for i in order], k)


def _as_query(store, query_vec):
    q = np.asarray(query_vec, dtype=np.float32).ravel()
    if len(store) and q.shape[0] != store.dim:
        raise ValueError(f"query dim {q.shape[0]} != store dim {store.dim}")
    return q


def search_exact(store: EmbeddingStore, query_vec, k: int, query_id: str = "",
                 block_rows: int = DEFAULT_BLOCK_ROWS) -> RankedList:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        return RankedList(query_id, [], k)
    q = _as_query(store, query_vec)
    cand_rows, cand_scores = [], []
    for start in range(0, len(store), block_rows):
        scores = _row_dots(store.matrix[start: start + block_rows], q)
        keep = _top_candidates(scores, k)
        cand_rows.append(keep + start)
        cand_scores.append(scores[keep])
    rows = np.concatenate(cand_rows)
    scores = np.concatenate(cand_scores)
    return _ranked(store, rows, scores, k, query_id)


def search_batch(store: EmbeddingStore, queries, k: int, query_ids=None, threads: int = 1, index=None,
                 n_probe: int = 1) -> list[RankedList]:
    """Search many queries; results are in query order for any ``threads``."""
    queries = np.asarray(queries, dtype=np.float32)
    query_ids = list(query_ids) if query_ids is not None else [str(i) for i in range(len(queries))]

    def one(i):
        if index is None:
            return search_exact(store, queries[i], k, query_ids[i])
        return search_ivf(index, store, queries[i], k, n_probe, query_ids[i])

    if threads <= 1:
        return [one(i) for i in range(len(queries))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(queries))))


@dataclass
class IvfIndex:
    centroids: np.ndarray
    postings: list[np.ndarray] = field(default_factory=list)
    trained: bool = False

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    def probe_order(self, q: np.ndarray) -> np.ndarray:
        d2 = ((self.centroids.astype(np.float64) - q.astype(np.float64)) ** 2).sum(1)
        return np.lexsort((np.arange(len(d2)), d2))

    def save(self, path) -> None:
        sizes = np.array([len(p) for p in self.postings], dtype=np.int64)
        rows = np.concatenate(self.postings) if self.postings else np.zeros(0, dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, magic=np.frombuffer(IVF_MAGIC, dtype=np.uint8), version=np.uint32(IVF_VERSION),
                     centroids=self.centroids, sizes=sizes, rows=rows.astype(np.int64))

    @classmethod
    def load(cls, path) -> "IvfIndex":
        try:
            z = np.load(path)
        except (ValueError, OSError) as e:
            raise CorruptFileError(f"{path}: not an IVF index file ({e})") from None
        with z:
            if "magic" not in z.files or z["magic"].tobytes() != IVF_MAGIC:
                raise CorruptFileError(f"{path}: not an IVF index file")
            if int(z["version"]) != IVF_VERSION:
                raise UnsupportedVersionError(f"{path}: IVF format version {int(z['version'])}, expected {IVF_VERSION}")
            bounds = np.concatenate([[0], np.cumsum(z["sizes"])])
            rows = z["rows"]
            postings = [rows[bounds[i]: bounds[i + 1]] for i in range(len(z["sizes"]))]
            return cls(z["centroids"], postings, True)


def _sq_dists(x, c):
    return (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]


def _kmeans_pp(x, n_clusters, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            remaining = np.setdiff1d(np.arange(n), centers)
            nxt = int(remaining[rng.integers(len(remaining))])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(1))
    return x[centers].copy()


def _assign(x, centroids):
    d = _sq_dists(x, centroids)
    return d.argmin(1), d


def build_ivf(store: EmbeddingStore, n_clusters: int, seed: int = 0, kmeans_iters: int = 20) -> IvfIndex:
    """Seeded k-means (k-means++ init, Lloyd iterations) over the store rows."""
    n = len(store)
    if not 1 <= n_clusters <= max(n, 1) or n == 0:
        raise ValueError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    x = store.matrix.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, n_clusters, rng)
    labels, d = _assign(x, centroids)
    for _ in range(kmeans_iters):
        new = centroids.copy()
        counts = np.bincount(labels, minlength=n_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        for c in np.flatnonzero(~nonempty):
            # reseed an empty cluster with the point farthest from its centroid
            far = int(np.argmax(d[np.arange(n), labels]))
            new[c] = x[far]
            labels[far] = c
            d[far, :] = _sq_dists(x[far: far + 1], new)[0]
        new_labels, d = _assign(x, new)
        centroids = new
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    labels, _ = _assign(x, centroids)
    postings = [np.flatnonzero(labels == c) for c in range(n_clusters)]
    return IvfIndex(centroids.astype(np.float32), postings, True)


def search_ivf(index: IvfIndex, store: EmbeddingStore, query_vec, k: int, n_probe: int,
               query_id: str = "") -> RankedList:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 1 <= n_probe <= index.n_clusters:
        raise ValueError(f"n_probe must be in [1, {index.n_clusters}], got {n_probe}")
    if len(store) == 0:
        return RankedList(query_id, [], k)
    q = _as_query(store, query_vec)
    probes = index.probe_order(q)[:n_probe]
    rows = np.concatenate([index.postings[c] for c in probes])
    if len(rows) == 0:
        return RankedList(query_id, [], k)
    scores = _row_dots(store.matrix[rows], q)
    keep = _top_candidates(scores, k)
    return _ranked(store, rows[keep], scores[keep], k, query_id)


def recall_vs_exact(approx: RankedList, exact: RankedList) -> float:
    truth = set(exact.doc_ids)
    return len(truth & set(approx.doc_ids)) / len(truth) if truth else 1.0
