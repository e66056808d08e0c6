"""Linear-fusion host recommender.

Item representation: ``h_i + sum_m T_m g_m(h_i, e_{i,m})`` where ``g_m`` is
the modality's adapter (identity for ``AdapterKind.NONE``). Score:
``h_u . repr(i)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .adapters import Adapter, AdapterKind, build_adapter
from .numkit import linear, xavier_init


@dataclass
class ItemTape:
    items: np.ndarray
    features: dict[str, np.ndarray]
    adapted: dict[str, np.ndarray]
    adapter_tapes: dict
    stop_grad_behavior: bool


class Recommender:
    """Embedding tables, fusion projections and per-modality adapters.

    ``params()`` exposes every trainable tensor under a flat name; the arrays
    are the live storage, so in-place updates through that dict change the
    model.
    """

    def __init__(
        self,
        user_emb: np.ndarray,
        item_emb: np.ndarray,
        fusion: Mapping[str, np.ndarray] | None = None,
        adapters: Mapping[str, Adapter] | None = None,
        stop_grad_behavior: bool = False,
    ):
        self.user_emb = np.asarray(user_emb, dtype=np.float64)
        self.item_emb = np.asarray(item_emb, dtype=np.float64)
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("user and item embeddings differ in dimension")
        self.fusion = dict(fusion or {})
        self.adapters = dict(adapters or {})
        self.stop_grad_behavior = stop_grad_behavior
        d = self.dim
        for m, t in self.fusion.items():
            if t.ndim != 2 or t.shape[0] != d:
                raise ValueError(f"fusion projection for {m!r} has shape {t.shape}, expected ({d}, d_m)")
            if m not in self.adapters:
                self.adapters[m] = build_adapter(AdapterKind.NONE, d, t.shape[1], None)
            ad = self.adapters[m]
            if ad.d != d or ad.d_m != t.shape[1]:
                raise ValueError(f"adapter dims for {m!r} do not match the fusion projection")
        if set(self.adapters) != set(self.fusion):
            raise ValueError("adapters and fusion projections must cover the same modalities")

    @classmethod
    def create(
        cls,
        n_users: int,
        n_items: int,
        d: int,
        feature_dims: Mapping[str, int],
        rng: np.random.Generator,
        adapter: AdapterKind | str = AdapterKind.NONE,
        **adapter_kw,
    ) -> "Recommender":
        stop_grad = adapter_kw.pop("stop_grad_behavior", False)
        user_emb = xavier_init(n_users, d, rng)
        item_emb = xavier_init(n_items, d, rng)
        fusion, adapters = {}, {}
        for m in sorted(feature_dims):
            fusion[m] = xavier_init(d, feature_dims[m], rng)
            adapters[m] = build_adapter(adapter, d, feature_dims[m], rng, **adapter_kw)
        return cls(user_emb, item_emb, fusion, adapters, stop_grad_behavior=stop_grad)

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def modalities(self) -> list[str]:
        return sorted(self.fusion)

    @property
    def adapter_kind(self) -> AdapterKind:
        kinds = {a.kind for a in self.adapters.values()}
        if not kinds:
            return AdapterKind.NONE
        if len(kinds) > 1:
            raise ValueError("mixed adapter kinds")
        return kinds.pop()

    def params(self) -> dict[str, np.ndarray]:
        out = {"user_emb": self.user_emb, "item_emb": self.item_emb}
        for m in self.modalities:
            out[f"fusion/{m}"] = self.fusion[m]
            for name, value in self.adapters[m].params.items():
                out[f"adapter/{m}/{name}"] = value
        return out

    def _check_features(self, features: Mapping[str, np.ndarray]):
        for m in self.modalities:
            if m not in features:
                raise ValueError(f"missing features for modality {m!r}")
            f = features[m]
            if f.shape != (self.n_items, self.fusion[m].shape[1]):
                raise ValueError(f"features for {m!r} have shape {f.shape}, expected ({self.n_items}, {self.fusion[m].shape[1]})")

    # ------------------------------------------------------------------ forward

    def item_forward(
        self,
        items,
        features: Mapping[str, np.ndarray],
        rng: np.random.Generator | None = None,
        exact: bool = False,
    ):
        """Representations for ``items`` plus the tape for :meth:`item_backward`.

        ``rng=None`` runs adapters in eval mode; ``exact`` makes every row
        independent of the batch it was computed in.
        """
        items = np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError("item index out of range")
        self._check_features(features)
        h = self.item_emb[items]
        reps = h.copy()
        feats, adapted, tapes = {}, {}, {}
        for m in self.modalities:
            e = features[m][items]
            out, tape = self.adapters[m].forward(e, h, rng, exact)
            reps += linear(out, self.fusion[m], exact)
            feats[m], adapted[m], tapes[m] = e, out, tape
        return reps, ItemTape(items, feats, adapted, tapes, self.stop_grad_behavior)

    def item_backward(self, tape: ItemTape, d_reps: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given the sensitivity of the item reps.

        Returned arrays are full-size (zeros outside touched rows).
        """
        grads = {name: np.zeros_like(p) for name, p in self.params().items()}
        d_h = d_reps.copy()
        for m in self.modalities:
            grads[f"fusion/{m}"] += d_reps.T @ tape.adapted[m]
            d_adapted = d_reps @ self.fusion[m]
            g, _, d_h_ad = self.adapters[m].backward(tape.adapter_tapes[m], d_adapted)
            for name, value in g.items():
                grads[f"adapter/{m}/{name}"] += value
            if not tape.stop_grad_behavior:
                d_h += d_h_ad
        np.add.at(grads["item_emb"], tape.items, d_h)
        return grads

    def item_representation(self, i: int, features: Mapping[str, np.ndarray]) -> np.ndarray:
        if not 0 <= i < self.n_items:
            raise IndexError(f"item {i} out of range")
        return self.item_forward(np.array([i]), features, exact=True)[0][0]

    def all_item_representations(self, features: Mapping[str, np.ndarray], exact: bool = False) -> np.ndarray:
        return self.item_forward(np.arange(self.n_items), features, exact=exact)[0]

    def adapted_features(self, modality: str, features: Mapping[str, np.ndarray]) -> np.ndarray:
        """Eval-mode adapter output for every item of one modality."""
        return self.adapters[modality].forward(features[modality], self.item_emb)[0]

    def score(self, u: int, i: int, features: Mapping[str, np.ndarray]) -> float:
        if not 0 <= u < self.n_users:
            raise IndexError(f"user {u} out of range")
        rep = self.item_representation(i, features)
        return float(np.dot(self.user_emb[u], rep))

    def score_all(self, u: int, features: Mapping[str, np.ndarray], reps: np.ndarray | None = None) -> np.ndarray:
        if not 0 <= u < self.n_users:
            raise IndexError(f"user {u} out of range")
        if reps is None:
            reps = self.all_item_representations(features, exact=True)
        hu = self.user_emb[u]
        # row-wise dot keeps each entry identical to score(u, i)
        return np.array([np.dot(hu, r) for r in reps])

    def score_users(self, users, reps: np.ndarray) -> np.ndarray:
        """Score matrix ``(len(users), n_items)`` for ranking."""
        return self.user_emb[np.asarray(users)] @ reps.T
