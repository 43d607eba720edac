"""Slow reference implementations used as test oracles."""
from itertools import combinations

import numpy as np
from scipy.stats import rankdata


def brute_dice(a, b, code):
    na = nb = both = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        na += x == code
        nb += y == code
        both += x == code and y == code
    return 1.0 if na + nb == 0 else 2.0 * both / (na + nb)


def brute_directed(A, B):
    return np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1)).min(1)


def brute_assd(A, B):
    return 0.5 * (brute_directed(A, B).mean() + brute_directed(B, A).mean())


def percentile_linear(x, q):
    s = sorted(x)
    pos = (len(s) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def brute_hd95(A, B):
    return max(percentile_linear(brute_directed(A, B), 95), percentile_linear(brute_directed(B, A), 95))


def brute_chamfer(A, B):
    d = ((A[:, None] - B[None]) ** 2).sum(-1)
    return d.min(1).mean() + d.min(0).mean()


def point_triangle_sq(p, a, b, c):
    """Squared distance from p to triangle abc: interior projection or the three edges."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    inside = all(np.dot(np.cross(v1 - v0, q - v0), n) >= 0 for v0, v1 in ((a, b), (b, c), (c, a)))
    if inside:
        return float(np.dot(p - q, p - q))
    best = np.inf
    for u, v in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - u, v - u) / np.dot(v - u, v - u), 0, 1)
        r = p - (u + t * (v - u))
        best = min(best, float(np.dot(r, r)))
    return best


def brute_pm(P, V, F):
    return float(np.mean([min(point_triangle_sq(p, *V[f]) for f in F) for p in P]))


def brute_mp(V, P):
    return float((((V[:, None] - P[None]) ** 2).sum(-1)).min(1).mean())


def exact_rank_sum(a, b):
    """Two-sided permutation p over every split of the pooled midranks."""
    pooled = np.concatenate([a, b])
    r = rankdata(pooled)
    na = len(a)
    mu = na * (len(pooled) + 1) / 2
    obs = abs(r[:na].sum() - mu)
    hits = total = 0
    for idx in combinations(range(len(pooled)), na):
        total += 1
        hits += abs(r[list(idx)].sum() - mu) >= obs - 1e-9
    return hits / total


def exact_signed_rank(d):
    d = d[d != 0]
    r = rankdata(np.abs(d))
    obs = abs(r[d > 0].sum() - r.sum() / 2)
    n = len(d)
    hits = 0
    for mask in range(2 ** n):
        s = sum(r[i] for i in range(n) if mask >> i & 1)
        hits += abs(s - r.sum() / 2) >= obs - 1e-9
    return hits / 2 ** n


def naive_bh(p):
    p = np.asarray(p, float)
    m = len(p)
    return np.array([min(1.0, min(p[k] * m / (np.sum(p <= p[k])) for k in range(m) if p[k] >= p[i]))
                     for i in range(m)])
