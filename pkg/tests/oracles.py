"""Reference computations written independently of the package code.

Everything here uses plain Python loops and ``math`` so that a shared bug
with the vectorised implementation is unlikely.
"""
from __future__ import annotations

import math

import numpy as np


def brute_rank(scores, excluded=()):
    """Descending score, ascending index for ties, via a plain sort key."""
    excluded = set(excluded)
    items = [i for i in range(len(scores)) if i not in excluded]
    return sorted(items, key=lambda i: (-float(scores[i]), i))


def brute_recall(ranked, positives, k):
    top = ranked[:k]
    return sum(1 for i in positives if i in top) / len(positives)


def brute_ndcg(ranked, positives, k):
    dcg = 0.0
    for pos, item in enumerate(ranked[:k]):
        if item in positives:
            dcg += 1.0 / math.log2(pos + 2)
    idcg = 0.0
    for pos in range(min(k, len(positives))):
        idcg += 1.0 / math.log2(pos + 2)
    return dcg / idcg


def brute_cosine(x, h):
    dot = sum(a * b for a, b in zip(x, h))
    nx = math.sqrt(sum(a * a for a in x))
    nh = math.sqrt(sum(b * b for b in h))
    return dot / (nx * nh)


def brute_heatmap(acts, weights):
    n, hh, ww = acts.shape
    out = [[0.0] * ww for _ in range(hh)]
    for l in range(n):
        for r in range(hh):
            for c in range(ww):
                out[r][c] += weights[l] * acts[l, r, c]
    return np.array(out)


def brute_kcore(pairs, k):
    """Repeatedly drop records touching an entity of degree < k."""
    pairs = set(pairs)
    while True:
        du, di = {}, {}
        for u, i in pairs:
            du[u] = du.get(u, 0) + 1
            di[i] = di.get(i, 0) + 1
        keep = {(u, i) for u, i in pairs if du[u] >= k and di[i] >= k}
        if keep == pairs:
            return keep
        pairs = keep


def scalar_befa(e, h, p):
    """One-row BeFA forward in scalar Python (eval mode, dense projections)."""
    def mv(w, x):
        return [sum(w[r][c] * x[c] for c in range(len(x))) for r in range(len(w))]

    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    z1 = [a + b for a, b in zip(mv(p["W1"], e), p["b1"])]
    e_dot = [max(0.0, z) for z in z1]
    gate = mv(p["P_gate"], h)
    t = [math.tanh(a + b) for a, b in zip(mv(p["W2"], e_dot), p["b2"])]
    e_ddot = [g * x for g, x in zip(gate, t)]
    merge = mv(p["P_merge"], h)
    s = [sig(a + b) for a, b in zip(mv(p["W3"], e_ddot), p["b3"])]
    return [m * x for m, x in zip(merge, s)]


def scalar_adam(param, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on a single float over a list of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        param -= lr * mh / (math.sqrt(vh) + eps)
    return param


def central_difference(f, arr: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` with respect to ``arr`` (mutated in place and restored)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + step
        up = f()
        arr[idx] = old - step
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor).

    Central differences at step 1e-6 carry about 1e-10 of rounding noise, so
    gradients far below the floor are compared in absolute terms instead.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
