"""Top-K graph counterfactual retrieval from real nodes.

A counterfactual for node ``v`` on pseudo-attribute column ``i`` is a node ``j``
from the candidate pool with the same pseudo-label as ``v`` and the opposite
bit in column ``i``; the K closest in squared L2 embedding distance are kept,
ties going to the lower node id.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def snapshot_id(h: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(h, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class CfIndex:
    """``ids[v, i, r]`` is the r-th counterfactual of node v on column i (-1 = none)."""

    ids: np.ndarray
    dists: np.ndarray
    counts: np.ndarray
    K: int
    snapshot: str

    @property
    def num_nodes(self) -> int:
        return self.ids.shape[0]

    @property
    def num_columns(self) -> int:
        return self.ids.shape[1]

    @property
    def shortfall(self) -> np.ndarray:
        return self.counts < self.K

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    def entries(self, v: int, i: int) -> list[tuple[int, float]]:
        c = self.counts[v, i]
        return [(int(j), float(d)) for j, d in zip(self.ids[v, i, :c], self.dists[v, i, :c])]

    def same_as(self, other: CfIndex, atol: float = 1e-12) -> bool:
        if self.K != other.K or not np.array_equal(self.counts, other.counts):
            return False
        if not np.array_equal(self.ids, other.ids):
            return False
        filled = self.ids >= 0
        return bool(np.all(np.abs(self.dists[filled] - other.dists[filled]) <= atol))


def _prepare(h, bits, labels, K, candidate_pool, columns):
    h = np.asarray(h, dtype=np.float64)
    bits = np.asarray(bits)
    labels = np.asarray(labels)
    n = h.shape[0]
    if K < 1:
        raise ValueError("K must be >= 1")
    if bits.shape[0] != n or labels.shape[0] != n:
        raise ValueError("h, bits and labels must share the node dimension")
    if candidate_pool is None:
        pool = np.arange(n)
    else:
        cp = np.asarray(candidate_pool)
        pool = np.flatnonzero(cp) if cp.dtype == bool else np.unique(cp.astype(np.int64))
    cols = np.arange(bits.shape[1]) if columns is None else np.asarray(columns, dtype=np.int64)
    return h, bits, labels, n, pool, cols


def _empty_index(n, ncol, K):
    return (
        np.full((n, ncol, K), -1, dtype=np.int64),
        np.full((n, ncol, K), np.nan),
        np.zeros((n, ncol), dtype=np.int64),
    )


def _smallest(sub: np.ndarray, take: int) -> np.ndarray:
    """Column indices of the ``take`` smallest entries per row, ordered by
    (value, column). Equivalent to a stable argsort truncated to ``take``."""
    if take >= sub.shape[1]:
        return np.argsort(sub, axis=1, kind="stable")[:, :take]
    kth = np.partition(sub, take - 1, axis=1)[:, take - 1:take]
    r, c = np.nonzero(sub <= kth)  # at least ``take`` per row; more only on ties
    order = np.lexsort((c, sub[r, c], r))
    starts = np.concatenate(([0], np.cumsum(np.bincount(r, minlength=sub.shape[0]))[:-1]))
    pick = order[starts[:, None] + np.arange(take)[None, :]]
    return c[pick]


def find_counterfactuals(h, bits, labels, K: int = 1, candidate_pool=None, columns=None) -> CfIndex:
    """Vectorized exact search.

    ``candidate_pool`` is a boolean mask or id list (all nodes when omitted);
    ``columns`` restricts the search, other columns get empty slots.
    """
    h, bits, labels, n, pool, cols = _prepare(h, bits, labels, K, candidate_pool, columns)
    ids, dists, counts = _empty_index(n, bits.shape[1], K)
    if len(pool) and n:
        hp = h[pool]
        dist = np.empty((n, len(pool)))
        step = max(1, 2_000_000 // max(1, len(pool) * h.shape[1]))
        for start in range(0, n, step):
            diff = h[start:start + step, None, :] - hp[None, :, :]
            dist[start:start + step] = np.einsum("abk,abk->ab", diff, diff)
        pool_labels, pool_bits = labels[pool], bits[pool]
        for i in cols:
            for c in np.unique(labels):
                for b in (0, 1):
                    query = np.flatnonzero((labels == c) & (bits[:, i] == b))
                    if not len(query):
                        continue
                    cand = np.flatnonzero((pool_labels == c) & (pool_bits[:, i] != b))
                    if not len(cand):
                        continue
                    sub = dist[np.ix_(query, cand)]
                    take = min(K, len(cand))
                    order = _smallest(sub, take)
                    ids[query, i, :take] = pool[cand[order]]
                    dists[query, i, :take] = np.take_along_axis(sub, order, axis=1)
                    counts[query, i] = take
    return CfIndex(ids, dists, counts, K, snapshot_id(h))


def brute_force_counterfactuals(h, bits, labels, K: int = 1, candidate_pool=None, columns=None) -> CfIndex:
    """Exhaustive per-(node, column) scan used as an oracle for :func:`find_counterfactuals`."""
    h, bits, labels, n, pool, cols = _prepare(h, bits, labels, K, candidate_pool, columns)
    ids, dists, counts = _empty_index(n, bits.shape[1], K)
    rows = [list(map(float, r)) for r in h]
    for v in range(n):
        for i in cols:
            found = []
            for j in pool:
                if j == v or labels[j] != labels[v] or bits[j, i] == bits[v, i]:
                    continue
                d = 0.0
                for a, b in zip(rows[v], rows[j]):
                    d += (a - b) * (a - b)
                found.append((d, int(j)))
            found.sort()
            found = found[:K]
            for r, (d, j) in enumerate(found):
                ids[v, i, r] = j
                dists[v, i, r] = d
            counts[v, i] = len(found)
    return CfIndex(ids, dists, counts, K, snapshot_id(h))


def audit_constraints(cf: CfIndex, bits, labels) -> list[tuple[int, int, int]]:
    """Return (node, column, cf_node) triples that violate the search constraints."""
    bad = []
    for v, i, r in zip(*np.nonzero(cf.ids >= 0)):
        j = cf.ids[v, i, r]
        if j == v or labels[j] != labels[v] or bits[j, i] == bits[v, i]:
            bad.append((int(v), int(i), int(j)))
    return bad


def dump_cf_csv(cf: CfIndex, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "column", "rank", "cf_node", "distance"])
        for v, i, r in zip(*np.nonzero(cf.ids >= 0)):
            w.writerow([int(v), int(i), int(r), int(cf.ids[v, i, r]), repr(float(cf.dists[v, i, r]))])
