"""Bearing outlier rejection by pairwise consistency maximization (PCM-B).

Bearings are validated per observer: every pair of bearings (i->j, i->k) is
checked against the angle the current position embedding predicts between
them; pairs whose angular discrepancy passes a chi-like gate become edges of
a consistency graph, and the maximum clique (exact branch and bound with a
greedy coloring bound) is kept as the inlier set. Ties on clique size are
broken toward the smallest total gate statistic.

In anonymous operation one physical detection may appear several times under
different claimed target ids; such duplicates are pairwise non-adjacent by
construction, as are two bearings claiming the same target, so at most one
copy can survive per detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

MIN_ANGLE_SIGMA = 1e-3


def two_sided_z(prob: float) -> float:
    """Two-sided normal quantile: P(|N(0,1)| <= z) = prob."""
    if not 0.0 < prob < 1.0:
        raise ValueError("probability threshold must be in (0, 1)")
    return float(norm.ppf(0.5 + 0.5 * prob))


def bearing_pair_angle(u, v) -> float:
    """Angle between two measured bearing directions of one observer."""
    return math.acos(min(1.0, max(-1.0, float(np.dot(u, v)))))


def position_pair_angle(positions, i, j, k, distance_sigma):
    """Angle at robot i between embedding positions j and k, with its std.

    Returns (theta, sigma_theta); sigma_theta propagates the per-axis
    position uncertainty distance_sigma over both baselines and is floored
    at MIN_ANGLE_SIGMA.
    """
    if len({i, j, k}) != 3:
        raise ValueError("position_pair_angle requires three distinct robots")
    vj = positions[j] - positions[i]
    vk = positions[k] - positions[i]
    nj = np.linalg.norm(vj)
    nk = np.linalg.norm(vk)
    theta = math.acos(min(1.0, max(-1.0, float(np.dot(vj, vk)) / max(nj * nk, 1e-12))))
    sigma = math.hypot(distance_sigma / max(nj, 1e-12), distance_sigma / max(nk, 1e-12))
    return theta, max(sigma, MIN_ANGLE_SIGMA)


@dataclass
class BearingMask:
    """Per-bearing inlier weights, aligned with ``frame.bearings`` order."""

    weights: np.ndarray

    def kept(self, index: int) -> bool:
        return self.weights[index] > 0.0

    @property
    def kept_indices(self):
        return np.nonzero(self.weights > 0.0)[0]


def build_consistency_graph(bearing_list, positions, noise, z):
    """Adjacency and gate statistics among one observer's bearings.

    ``bearing_list`` is a list of (frame_index, BearingMeasurement) for a
    single observer. Returns (adj, stats) square arrays. Bearings whose
    target lies outside the embedding stay isolated.
    """
    m = len(bearing_list)
    adj = np.zeros((m, m), dtype=bool)
    stats = np.zeros((m, m))
    n_emb = len(positions)
    var_b2 = 2.0 * noise.bearing_sigma**2

    dirs = np.array([b.direction for _, b in bearing_list])
    targets = np.array([b.target for _, b in bearing_list])
    observer = bearing_list[0][1].observer
    th_meas = np.arccos(np.clip(dirs @ dirs.T, -1.0, 1.0))

    # angle predicted by the embedding, with propagated position uncertainty
    pos = np.asarray(positions)
    valid = (targets < n_emb) & (targets != observer)
    vecs = np.zeros((m, 3))
    vecs[valid] = pos[targets[valid]] - pos[observer]
    norms = np.linalg.norm(vecs, axis=1)
    safe = np.maximum(norms, 1e-12)
    units = vecs / safe[:, None]
    th_pos = np.arccos(np.clip(units @ units.T, -1.0, 1.0))
    inv = noise.distance_sigma / safe
    sig_pos = np.maximum(np.hypot(inv[:, None], inv[None, :]), MIN_ANGLE_SIGMA)

    stat = np.abs(th_meas - th_pos) / np.sqrt(var_b2 + sig_pos**2)
    ok = stat <= z
    ok &= valid[:, None] & valid[None, :]
    ok &= targets[:, None] != targets[None, :]
    # duplicate claims of one physical detection stay non-adjacent
    first_seen: dict[bytes, int] = {}
    gvec = np.empty(m, dtype=np.int64)
    for k, (_, b) in enumerate(bearing_list):
        gvec[k] = first_seen.setdefault(b.direction.tobytes(), k)
    ok &= gvec[:, None] != gvec[None, :]
    np.fill_diagonal(ok, False)
    iu = np.triu_indices(m, 1)
    keep = ok[iu]
    adj[iu[0][keep], iu[1][keep]] = True
    adj |= adj.T
    stats[adj] = stat[adj]
    return adj, stats


def max_clique(adj, stats=None):
    """Exact maximum clique; ties broken by minimal total edge statistic.

    Branch and bound with a greedy-coloring upper bound on bitset candidate
    sets. Deterministic for a given input.
    """
    n = len(adj)
    if n == 0:
        return []
    # Complete graph: every vertex is mutually consistent, no search needed.
    if int(adj.sum()) + int(np.sum(np.diag(adj) == 0)) == n * n:
        return list(range(n))
    if stats is None:
        stats = np.zeros((n, n))
    order0 = sorted(range(n), key=lambda v: -int(np.sum(adj[v])))
    nb = [0] * n
    for a in range(n):
        mask = 0
        for b in range(n):
            if adj[order0[a], order0[b]]:
                mask |= 1 << b
        nb[a] = mask
    st = stats[np.ix_(order0, order0)]

    best: list[int] = []
    best_size = 0
    best_stat = math.inf

    def coloring(P):
        order, bounds = [], []
        U = P
        color = 0
        while U:
            color += 1
            Q = U
            while Q:
                v = (Q & -Q).bit_length() - 1
                order.append(v)
                bounds.append(color)
                U &= ~(1 << v)
                Q &= ~(1 << v)
                Q &= ~nb[v]
        return order, bounds

    def expand(R, running, P):
        nonlocal best, best_size, best_stat
        if P == 0:
            if len(R) > best_size or (len(R) == best_size and running < best_stat - 1e-15):
                best = R.copy()
                best_size = len(R)
                best_stat = running
            return
        order, bounds = coloring(P)
        for i in range(len(order) - 1, -1, -1):
            v = order[i]
            total = len(R) + bounds[i]
            if total < best_size:
                return
            if total == best_size and running >= best_stat:
                return
            add = sum(st[u, v] for u in R)
            expand(R + [v], running + add, P & nb[v])
            P &= ~(1 << v)
        # P exhausted: R itself was already scored through leaf calls above
        return

    full = (1 << n) - 1
    expand([], 0.0, full)
    return sorted(order0[v] for v in best)


def reject_outliers(frame, positions, noise, prob_threshold: float = 0.95) -> BearingMask:
    """Validate a frame's bearings against a position embedding.

    Observers with at most one bearing pass through unchanged. Returns a
    BearingMask whose weights are 1 for kept bearings and 0 otherwise.
    """
    z = two_sided_z(prob_threshold)
    weights = np.zeros(len(frame.bearings))
    by_observer: dict[int, list] = {}
    for idx, b in enumerate(frame.bearings):
        by_observer.setdefault(b.observer, []).append((idx, b))
    for _, blist in sorted(by_observer.items()):
        if len(blist) <= 1:
            for idx, _ in blist:
                weights[idx] = 1.0
            continue
        adj, stats = build_consistency_graph(blist, positions, noise, z)
        for local in max_clique(adj, stats):
            weights[blist[local][0]] = 1.0
    return BearingMask(weights)
