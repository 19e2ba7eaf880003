"""Pseudo-label production: k-reciprocal distances, DBSCAN, k-means."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
import math

import numpy as np

from .tensor import as_matrix, pairwise_sqeuclidean

OUTLIER = -1


@dataclass
class RerankConfig:
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be >= 1")
        if self.k2 > self.k1:
            raise ValueError(f"k2 ({self.k2}) must not exceed k1 ({self.k1})")
        if not 0.0 <= self.lambda_value <= 1.0:
            raise ValueError("lambda_value must lie in [0, 1]")


@dataclass
class DbscanConfig:
    p: float = 0.01
    min_samples: int = 4

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        if self.min_samples < 2:
            raise ValueError("min_samples must be >= 2")


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    num_clusters: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_raw(cls, raw, **meta) -> "PseudoLabelSet":
        """Relabel arbitrary ids to contiguous 0..M-1 by first appearance."""
        raw = np.asarray(raw, dtype=np.int64)
        out = np.full(len(raw), OUTLIER, dtype=np.int64)
        mapping: dict[int, int] = {}
        for i, r in enumerate(raw):
            if r == OUTLIER:
                continue
            out[i] = mapping.setdefault(int(r), len(mapping))
        return cls(out, len(mapping), dict(meta))

    @property
    def num_outliers(self) -> int:
        return int((self.labels == OUTLIER).sum())

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("index,cluster\n")
            for i, c in enumerate(self.labels):
                f.write(f"{i},{int(c)}\n")


def _initial_rank(dist: np.ndarray) -> np.ndarray:
    return np.argsort(dist, axis=1, kind="stable")


def _reciprocal_sets(rank: np.ndarray, k: int) -> list[np.ndarray]:
    """For every i, the members of i's top-(k+1) list that also rank i in their top-(k+1)."""
    top = rank[:, : k + 1]
    n = len(rank)
    mutual = (top[top] == np.arange(n)[:, None, None]).any(axis=2)
    return [top[i][mutual[i]] for i in range(n)]


def k_reciprocal_distances(features, cfg: RerankConfig | None = None, dist=None) -> np.ndarray:
    """Jaccard distance over k-reciprocal neighbour encodings, blended with the original.

    Follows the usual re-ranking recipe for a single set: squared Euclidean
    distances normalised per row by the row maximum, k1-reciprocal sets
    expanded with k1/2-reciprocal sets of their members, Gaussian-weighted
    encodings, k2 local query expansion, then
    ``(1 - lambda) * jaccard + lambda * normalised`` symmetrised.
    """
    cfg = cfg or RerankConfig()
    if dist is None:
        dist = pairwise_sqeuclidean(as_matrix(features))
    n = len(dist)
    if n <= cfg.k1:
        raise ValueError(f"k-reciprocal encoding needs more than k1={cfg.k1} points, got {n}")
    row_max = dist.max(axis=1, keepdims=True)
    original = dist / np.where(row_max > 0, row_max, 1.0)
    rank = _initial_rank(original)
    rec_full = _reciprocal_sets(rank, cfg.k1)
    rec_half = _reciprocal_sets(rank, int(round(cfg.k1 / 2.0)))

    V = np.zeros((n, n))
    for i in range(n):
        rec = rec_full[i]
        rec_set = set(rec.tolist())
        parts = [rec]
        for cand in rec:
            cand_rec = rec_half[cand]
            overlap = sum(1 for j in cand_rec.tolist() if j in rec_set)
            if overlap > 2.0 / 3.0 * len(cand_rec):
                parts.append(cand_rec)
        expansion = np.unique(np.concatenate(parts))
        w = np.exp(-original[i, expansion])
        V[i, expansion] = w / w.sum()

    if cfg.k2 != 1:
        V = V[rank[:, : cfg.k2]].mean(axis=1)

    # overlap[i, j] = sum_c min(V[i, c], V[j, c]); only rows sharing a
    # non-zero column contribute, so accumulate column by column
    overlap = np.zeros((n, n))
    Vt = V.T
    for c in range(n):
        rows = np.flatnonzero(Vt[c])
        if len(rows):
            vals = Vt[c, rows]
            overlap[np.ix_(rows, rows)] += np.minimum.outer(vals, vals)
    # every row of V sums to one, so |union| = 2 - overlap; taking the row
    # masses from the same accumulation keeps identical rows at exactly 0
    mass = np.diag(overlap).copy()
    jaccard = 1.0 - overlap / (mass[:, None] + mass[None, :] - overlap)
    final = (1.0 - cfg.lambda_value) * jaccard + cfg.lambda_value * original
    final = 0.5 * (final + final.T)
    np.maximum(final, 0.0, out=final)
    np.fill_diagonal(final, 0.0)
    return final


def eps_from_p(dist, p: float) -> float:
    """Mean of the smallest ceil(p * n_pairs) pairwise distances (each pair once)."""
    dist = np.asarray(dist)
    n = len(dist)
    if n < 2:
        raise ValueError("eps_from_p needs at least 2 points")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    upper = dist[np.triu_indices(n, k=1)]
    count = max(1, math.ceil(p * len(upper) - 1e-9))
    smallest = np.partition(upper, count - 1)[:count]
    return float(np.sort(smallest).mean())


def dbscan(dist, eps: float, min_samples: int) -> PseudoLabelSet:
    """DBSCAN on a precomputed distance matrix.

    A point is core when at least ``min_samples`` points (itself included)
    lie within ``eps``. Seeds are taken in index order and clusters grow
    breadth-first, so a border point reachable from several clusters joins
    the one whose seed has the smallest index.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    dist = np.asarray(dist)
    n = len(dist)
    within = dist <= eps
    neighbours = [np.flatnonzero(within[i]) for i in range(n)]
    core = within.sum(axis=1) >= min_samples
    labels = np.full(n, OUTLIER, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if labels[seed] != OUTLIER or not core[seed]:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            pt = queue.popleft()
            for nb in neighbours[pt]:
                if labels[nb] == OUTLIER:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
        cluster += 1
    return PseudoLabelSet(labels, cluster, {"eps": float(eps), "num_core": int(core.sum())})


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(features, k: int, rng: np.random.Generator, max_iters: int = 100) -> PseudoLabelSet:
    """Lloyd's algorithm from k-means++ seeds.

    ``meta["inertia"]`` logs the within-cluster sum of squares after each
    assignment step. An emptied cluster is re-seeded at the point farthest
    from its assigned centroid.
    """
    x = as_matrix(features)
    n = len(x)
    if k > n:
        raise ValueError(f"k-means: k={k} exceeds the number of points {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    centers = kmeans_plusplus(x, k, rng)
    rows = np.arange(n)
    assign = None
    history = []
    for _ in range(max_iters):
        d = pairwise_sqeuclidean(x, centers)
        new = np.argmin(d, axis=1)
        history.append(float(d[rows, new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=k)
        cost = d[rows, assign]
        for c in np.flatnonzero(counts == 0):
            far = int(np.argmax(cost))
            counts[assign[far]] -= 1
            assign[far] = c
            counts[c] = 1
            cost[far] = 0.0
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        centers = sums / counts[:, None]
    d = pairwise_sqeuclidean(x, centers)
    history.append(float(d[rows, assign].sum()))
    out = PseudoLabelSet.from_raw(assign, inertia=history, iterations=len(history) - 1)
    out.meta["centers"] = centers
    return out


class ClusterCollapse(RuntimeError):
    """Fewer than two usable clusters survived pseudo-labelling."""


@dataclass
class PseudoLabeledSubset:
    indices: np.ndarray
    labels: np.ndarray
    num_clusters: int


def assign_pseudo_labels(pseudo: PseudoLabelSet, n_rows: int | None = None,
                         min_size: int = 2) -> PseudoLabeledSubset:
    """Drop outliers and clusters smaller than ``min_size``; re-compact ids."""
    labels = np.asarray(pseudo.labels)
    if n_rows is not None and len(labels) != n_rows:
        raise ValueError(f"pseudo-label set covers {len(labels)} rows, dataset has {n_rows}")
    keep_ids = [c for c in range(pseudo.num_clusters) if (labels == c).sum() >= min_size]
    remap = {c: j for j, c in enumerate(keep_ids)}
    idx = np.array([i for i, c in enumerate(labels) if c in remap], dtype=np.int64)
    new = np.array([remap[labels[i]] for i in idx], dtype=np.int64)
    if len(keep_ids) < 2:
        raise ClusterCollapse(f"only {len(keep_ids)} cluster(s) with >= {min_size} members survived")
    return PseudoLabeledSubset(idx, new, len(keep_ids))
