"""Rank, percentile and retrieval metrics over a frozen gallery of embeddings.

Distances are Euclidean. Ties are broken by gallery id: of two equidistant
items the one with the smaller id ranks first.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .errors import ContractError, DimensionError, UnknownIdError


class RankingIndex:
    """Immutable gallery of unit-norm embeddings with class labels."""

    def __init__(self, embeddings, labels, atol=1e-6):
        emb = np.array(embeddings, dtype=np.float64)
        lab = np.array(labels, dtype=np.int64)
        if emb.ndim != 2:
            raise DimensionError(f"gallery embeddings must be (N, D), got {emb.shape}")
        if len(emb) != len(lab):
            raise DimensionError(f"{len(emb)} embeddings but {len(lab)} labels")
        if len(emb) == 0:
            raise ContractError("empty gallery")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > atol):
            raise ContractError(f"gallery rows must be unit norm (worst |norm-1| = {np.abs(norms - 1).max():.3g})")
        emb.setflags(write=False)
        lab.setflags(write=False)
        self._emb = emb
        self._lab = lab

    @property
    def embeddings(self):
        return self._emb

    @property
    def labels(self):
        return self._lab

    @property
    def dim(self):
        return self._emb.shape[1]

    def __len__(self):
        return len(self._lab)

    def _check_id(self, i):
        if not (0 <= int(i) < len(self)):
            raise UnknownIdError(f"gallery id {i} not in 0..{len(self) - 1}")
        return int(i)

    def distances(self, q):
        """Distances from one embedding (D,) or many (Q, D) to every gallery row."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-1] != self.dim:
            raise DimensionError(f"query dim {q.shape[-1]} != gallery dim {self.dim}")
        if q.ndim == 1:
            return np.sqrt(((self._emb - q) ** 2).sum(axis=1))
        return pairwise_distances(q, self._emb)

    def rank_of(self, q, c_id, exclude=None):
        """1-based rank of gallery item ``c_id`` for query ``q``."""
        c_id = self._check_id(c_id)
        excluded = {self._check_id(i) for i in (exclude or ())}
        if c_id in excluded:
            raise ContractError(f"candidate {c_id} is in the exclude set")
        d = self.distances(q)
        return _rank(d, c_id, excluded)

    def percentile(self, q, c_id, exclude=None):
        """Rank of ``c_id`` over the searched gallery size, scaled to [0, 100]."""
        n = len(self) - len({int(i) for i in (exclude or ())})
        return 100.0 * self.rank_of(q, c_id, exclude) / n

    def order(self, q, exclude=None):
        """Gallery ids sorted by distance to ``q`` (ties by id)."""
        d = self.distances(q)
        ids = np.arange(len(self))
        keep = np.ones(len(self), bool)
        for i in exclude or ():
            keep[self._check_id(i)] = False
        ordering = np.lexsort((ids[keep], d[keep]))
        return ids[keep][ordering]


def pairwise_distances(a, b, block=1 << 22):
    """Euclidean distance matrix from explicit differences.

    Identical rows always get bit-identical distances (a matrix-product
    expansion does not guarantee this), which keeps id tie-breaking exact.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    step = max(1, block // max(1, b.size))
    for s in range(0, len(a), step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def _rank(d, c_id, excluded=()):
    dc = d[c_id]
    ahead = (d < dc) | ((d == dc) & (np.arange(len(d)) < c_id))
    for i in excluded:
        ahead[i] = False
    return 1 + int(ahead.sum())


def ranks_from_distances(d, dc, c_ids, skip=None):
    """Vectorised ranks for many queries at once.

    ``d`` holds gallery distances (T, N); ``dc`` (T,) is the distance to the
    candidate whose rank is wanted and ``c_ids`` (T,) its gallery id used for
    tie-breaking (pass -1 for a candidate outside the gallery, which then
    loses every tie). ``skip`` is an optional (T, N) boolean mask of gallery
    entries that do not compete.
    """
    d = np.asarray(d)
    dc = np.asarray(dc)[:, None]
    ids = np.arange(d.shape[1])[None, :]
    c_ids = np.asarray(c_ids)[:, None]
    tie_wins = np.where(c_ids < 0, True, ids < c_ids)
    ahead = (d < dc) | ((d == dc) & tie_wins & (ids != c_ids))
    if skip is not None:
        ahead &= ~skip
    return 1 + ahead.sum(axis=1)


def _loo_orderings(index, chunk=512):
    """Leave-one-out orderings of the gallery, yielded in query chunks."""
    n = len(index)
    ids = np.arange(n)
    for s in range(0, n, chunk):
        q = index.embeddings[s:s + chunk]
        d = pairwise_distances(q, index.embeddings)
        d[np.arange(len(q)), ids[s:s + len(q)]] = np.inf
        # stable argsort on distance == lexsort on (distance, id)
        order = np.argsort(d, axis=1, kind="stable")[:, :n - 1]
        yield s, order


def recall_at_k(index, k, queries=None, query_labels=None, query_ids=None):
    """Percentage of queries with a same-class item among their top ``k``.

    Without ``queries`` every gallery item is used as a leave-one-out query.
    External queries may name a gallery id each (``query_ids``, -1 for none)
    that is removed from their neighbourhood.
    """
    n = len(index)
    if k < 1 or k >= n:
        raise ContractError(f"k must satisfy 1 <= k < |X| = {n}, got {k}")
    if queries is None:
        hits = []
        for s, order in _loo_orderings(index):
            top = index.labels[order[:, :k]]
            hits.append((top == index.labels[s:s + len(order), None]).any(axis=1))
        hits = np.concatenate(hits)
        return 100.0 * int(hits.sum()) / len(hits)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    query_labels = np.asarray(query_labels)
    if len(query_labels) != len(queries):
        raise DimensionError("one label per query required")
    d = index.distances(queries)
    if query_ids is not None:
        qi = np.asarray(query_ids)
        rows = np.flatnonzero(qi >= 0)
        d[rows, qi[rows]] = np.inf
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    hits = (index.labels[order] == query_labels[:, None]).any(axis=1)
    return 100.0 * int(hits.sum()) / len(hits)


def average_precision(relevant):
    """AP of one ranked boolean relevance list; 0 when nothing is relevant."""
    relevant = np.asarray(relevant, dtype=bool)
    if not relevant.any():
        return 0.0
    pos = np.flatnonzero(relevant) + 1
    return float((np.arange(1, len(pos) + 1) / pos).mean())


def mean_average_precision(index):
    """Leave-one-out mAP over the full (untruncated) ranking, in [0, 100]."""
    aps = []
    for s, order in _loo_orderings(index):
        rel = index.labels[order] == index.labels[s:s + len(order), None]
        for row in rel:
            aps.append(average_precision(row))
    return 100.0 * float(np.mean(aps))


def kmeans(x, n_clusters, seed=0, iterations=100):
    """Lloyd's algorithm from ``n_clusters`` distinct random rows; returns assignments."""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= n_clusters <= len(x):
        raise ContractError(f"n_clusters must lie in 1..{len(x)}")
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(len(x), n_clusters, replace=False)].copy()
    assign = None
    for _ in range(iterations):
        new = np.argmin(pairwise_distances(x, centers), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(n_clusters):
            members = x[assign == j]
            if len(members):  # empty clusters keep their previous centre
                centers[j] = members.mean(axis=0)
    return assign


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi_score(a, b):
    """Normalised mutual information with arithmetic-mean normalisation, in [0, 100]."""
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1.0)
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    if ha == 0.0 and hb == 0.0:
        return 100.0
    n = table.sum()
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    return 100.0 * max(0.0, 2.0 * mi / (ha + hb))


def nmi(index, n_clusters=None, seed=0):
    """NMI between seeded k-means clusters of the gallery and its labels."""
    k = len(np.unique(index.labels)) if n_clusters is None else int(n_clusters)
    return nmi_score(kmeans(index.embeddings, k, seed), index.labels)


def benign_metrics(index, seed=0):
    """R@1, R@2, mAP (full ranking) and NMI of a gallery against itself."""
    n = len(index)
    return {
        "R@1": recall_at_k(index, 1) if n > 1 else 0.0,
        "R@2": recall_at_k(index, 2) if n > 2 else 0.0,
        "mAP": mean_average_precision(index),
        "NMI": nmi(index, seed=seed),
    }


def export_embeddings_csv(index, path, comment=None):
    """Write ``id,label,e0..e{D-1}`` rows with round-trip float precision."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"e{j}" for j in range(index.dim)])
        for i, (row, lab) in enumerate(zip(index.embeddings, index.labels)):
            w.writerow([i, int(lab)] + [repr(float(v)) for v in row])


def read_embeddings_csv(path):
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    for r in reader:
        rows.append(r)
    labels = np.array([int(r[1]) for r in rows])
    emb = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), len(header) - 2)
    return RankingIndex(emb, labels)


def top1_pool_size(n, w):
    """Size of the nearest-neighbour pool used to sample CA-/QA- partners."""
    return min(n, max(int(w), math.ceil(0.01 * n)))
