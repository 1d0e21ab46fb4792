"""Deterministic farthest point sampling and exact nearest-neighbor search.

Every routine here is a pure function of the input coordinates. Ties are
broken by coordinates (lexicographic) and then by row index, so a decoder that
only sees the geometry rebuilds exactly the same samples and neighborhoods as
the encoder did.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_CHUNK = 256


@dataclass
class Neighborhood:
    indices: np.ndarray  # [Q, K] int64, rows sorted by distance then index
    rel_pos: np.ndarray  # [Q, K, 3], ref[indices] - query


def _centroid(p: np.ndarray) -> np.ndarray:
    # fsum is exactly rounded, so the centroid does not depend on row order
    return np.array([math.fsum(p[:, c]) for c in range(p.shape[1])]) / len(p)


def _pick(p: np.ndarray, score: np.ndarray) -> int:
    best = score.max()
    cand = np.flatnonzero(score == best)
    if len(cand) == 1:
        return int(cand[0])
    c = p[cand]
    order = np.lexsort((cand, c[:, 2], c[:, 1], c[:, 0]))
    return int(cand[order[0]])


def fps(positions, m: int) -> np.ndarray:
    """Greedy farthest point sampling.

    The first pick is the point farthest from the centroid; each later pick
    maximizes the distance to the already selected set. Returns indices in
    selection order.
    """
    p = np.asarray(positions, dtype=np.float64)
    n = len(p)
    if not 1 <= m <= n:
        raise ValueError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    out = np.empty(m, dtype=np.int64)
    out[0] = _pick(p, ((p - _centroid(p)) ** 2).sum(axis=1))
    dist = ((p - p[out[0]]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = _pick(p, dist)
        out[i] = nxt
        np.minimum(dist, ((p - p[nxt]) ** 2).sum(axis=1), out=dist)
    return out


def _sorted_topk(d: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k smallest entries, ordered by (value, index)."""
    r = d.shape[1]
    if k == r:
        return np.argsort(d, axis=1, kind="stable")
    cand = np.argpartition(d, k - 1, axis=1)[:, :k]
    cd = np.take_along_axis(d, cand, axis=1)
    kth = cd.max(axis=1)
    ties = (d <= kth[:, None]).sum(axis=1) > k
    order = np.lexsort((cand, cd), axis=1)
    out = np.take_along_axis(cand, order, axis=1)
    for row in np.flatnonzero(ties):
        out[row] = np.argsort(d[row], kind="stable")[:k]
    return out


def knn(queries, refs, k: int) -> Neighborhood:
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    if not 1 <= k <= len(r):
        raise ValueError(f"knn needs 1 <= k <= R, got k={k}, R={len(r)}")
    idx = np.empty((len(q), k), dtype=np.int64)
    for s in range(0, len(q), _CHUNK):
        diff = r[None, :, :] - q[s:s + _CHUNK, None, :]
        d = (diff * diff).sum(axis=2)
        idx[s:s + _CHUNK] = _sorted_topk(d, k)
    rel = r[idx] - q[:, None, :]
    return Neighborhood(idx, rel)


def nearest(queries, refs) -> np.ndarray:
    if len(refs) == 0:
        raise ValueError("nearest needs at least one reference point")
    return knn(queries, refs, 1).indices[:, 0]


def group(features, indices) -> np.ndarray:
    f = np.asarray(features)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= len(f)):
        raise IndexError(f"group index out of range for {len(f)} feature rows")
    return f[idx]
