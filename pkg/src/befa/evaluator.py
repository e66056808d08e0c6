"""All-ranking top-K evaluation (Recall@K, NDCG@K)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio import DataSplit
from .recmodel import Recommender


class NoEvaluableUsers(ValueError):
    """No user has a positive in the evaluated part of the split."""


def rank_items(scores, exclusions: Iterable[int] = ()) -> np.ndarray:
    """Item indices by descending score; ties go to the lower index.

    Excluded items are dropped from the ranking.
    """
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    excl = np.fromiter(exclusions, dtype=np.int64)
    keep[excl] = False
    idx = np.flatnonzero(keep)
    order = np.argsort(-scores[idx], kind="stable")
    return idx[order]


def recall_at_k(ranked: Sequence[int], positives: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    positives = set(positives)
    if not positives:
        raise ValueError("recall undefined without positives")
    hits = sum(1 for i in list(ranked)[:k] if i in positives)
    return hits / len(positives)


def _discounts(k: int) -> np.ndarray:
    # scalar log2 per rank keeps the values identical to a plain loop
    return np.array([1.0 / math.log2(r + 1) for r in range(1, k + 1)])


def ndcg_at_k(ranked: Sequence[int], positives: Iterable[int], k: int) -> float:
    """Binary-gain NDCG; gain at 1-based rank r is 1/log2(r + 1)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    positives = set(positives)
    if not positives:
        raise ValueError("ndcg undefined without positives")
    disc = _discounts(k)
    dcg = 0.0
    for r, i in enumerate(list(ranked)[:k]):
        if i in positives:
            dcg += disc[r]
    idcg = float(np.cumsum(disc[: min(k, len(positives))])[-1])
    return float(dcg / idcg)


@dataclass
class MetricsTable:
    ks: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    per_user: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        out = {"users": self.n_users}
        for k in self.ks:
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        head = f"{'K':>4}  {'Recall':>8}  {'NDCG':>8}"
        rows = [f"{k:>4}  {self.recall[k]:>8.4f}  {self.ndcg[k]:>8.4f}" for k in self.ks]
        return "\n".join([head, *rows, f"users evaluated: {self.n_users}"])


def _exclusion_sets(split: DataSplit, parts: Sequence[str]) -> list[set[int]]:
    out: list[set[int]] = [set() for _ in range(split.n_users)]
    for part in parts:
        for u, i in getattr(split, part):
            out[int(u)].add(int(i))
    return out


def evaluate(
    model: Recommender,
    split: DataSplit,
    features: Mapping[str, np.ndarray],
    ks: Sequence[int] = (10, 20),
    part: str = "test",
    exclude: Sequence[str] | None = None,
    chunk: int = 1024,
) -> MetricsTable:
    """Mean per-user Recall@K / NDCG@K over users with a positive in ``part``.

    ``exclude`` defaults to every split part that precedes ``part``
    (train for validation, train + valid for test).
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive")
    if exclude is None:
        exclude = {"valid": ("train",), "test": ("train", "valid")}.get(part, ("train",))
    targets = split.positives(part)
    users = [u for u in range(split.n_users) if targets[u]]
    if not users:
        raise NoEvaluableUsers(f"no user has a {part} positive")
    excl = _exclusion_sets(split, exclude)
    reps = model.all_item_representations(features)
    kmax = min(max(ks), split.n_items)
    disc = _discounts(max(ks))

    rec = {k: np.empty(len(users)) for k in ks}
    ndc = {k: np.empty(len(users)) for k in ks}
    for start in range(0, len(users), chunk):
        batch = users[start:start + chunk]
        scores = model.score_users(batch, reps)
        valid = np.ones_like(scores, dtype=bool)
        pos = np.zeros_like(scores, dtype=bool)
        for row, u in enumerate(batch):
            valid[row, list(excl[u])] = False
            pos[row, list(targets[u])] = True
        scores = np.where(valid, scores, -np.inf)
        top = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
        hits = np.take_along_axis(pos & valid, top, axis=1)
        n_pos = pos.sum(axis=1)
        for k in ks:
            h = hits[:, :k]
            rec[k][start:start + len(batch)] = h.sum(axis=1) / n_pos
            # left-to-right sums in rank order, as in the definition
            dcg = np.cumsum(h * disc[: h.shape[1]], axis=1)[:, -1]
            idcg = np.cumsum(disc[:k])[np.minimum(n_pos, k) - 1]
            ndc[k][start:start + len(batch)] = dcg / idcg

    # fsum makes the mean independent of user order
    n = len(users)
    return MetricsTable(
        ks,
        {k: math.fsum(rec[k]) / n for k in ks},
        {k: math.fsum(ndc[k]) / n for k in ks},
        n,
        {"users": np.array(users), **{f"recall@{k}": rec[k] for k in ks}, **{f"ndcg@{k}": ndc[k] for k in ks}},
    )
