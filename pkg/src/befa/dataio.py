"""Interaction and content-feature ingestion, k-core pruning, splitting, and
a planted-factor synthetic generator."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"BEFA"
FEATURE_VERSION = 1
_DTYPE_F32 = 0
_FEATURE_HEADER = struct.Struct("<4sBBII")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class EmptyAfterFiltering(DataError):
    """k-core pruning removed every interaction."""


@dataclass(frozen=True)
class InteractionSet:
    """Deduplicated implicit-feedback records with dense indices.

    ``records`` is an ``(n, 2)`` int64 array of (user, item) pairs;
    ``user_ids[u]`` / ``item_ids[i]`` give the external identifiers.
    """

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    records: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.records)

    def user_index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    def pairs(self) -> set[tuple[int, int]]:
        return {(int(u), int(i)) for u, i in self.records}

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionSet):
            return NotImplemented
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.records, other.records)
        )

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "InteractionSet":
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        seen: set[tuple[int, int]] = set()
        recs: list[tuple[int, int]] = []
        for u, i in pairs:
            ui = users.setdefault(u, len(users))
            ii = items.setdefault(i, len(items))
            if (ui, ii) not in seen:
                seen.add((ui, ii))
                recs.append((ui, ii))
        arr = np.array(recs, dtype=np.int64).reshape(-1, 2)
        return cls(tuple(users), tuple(items), arr)


@dataclass(frozen=True)
class DataSplit:
    """Train / validation / test record arrays over one shared index space."""

    base: InteractionSet
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int

    @property
    def n_users(self) -> int:
        return self.base.n_users

    @property
    def n_items(self) -> int:
        return self.base.n_items

    def positives(self, part: str) -> list[set[int]]:
        """Per-user item sets for ``part`` in {"train", "valid", "test"}."""
        recs = getattr(self, part)
        out: list[set[int]] = [set() for _ in range(self.n_users)]
        for u, i in recs:
            out[int(u)].add(int(i))
        return out


@dataclass
class FeatureMatrix:
    data: np.ndarray
    modality: str = "v"
    item_ids: tuple[str, ...] | None = None
    # synthetic only: 0 clean, 1 drift, 2 omission
    corruption: np.ndarray | None = None

    @property
    def n_items(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    users: int = 200
    items: int = 300
    latent_dim: int = 8
    feature_dim: int = 32
    per_user: int = 20
    drift_prob: float = 0.3
    omit_prob: float = 0.3
    omit_frac: float = 0.5
    noise: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.drift_prob <= 1.0 and 0.0 <= self.omit_prob <= 1.0):
            raise ValueError("corruption probabilities must lie in [0, 1]")
        if not 0.0 < self.omit_frac < 1.0:
            raise ValueError("omit_frac must lie in (0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.latent_dim >= self.feature_dim:
            raise ValueError("latent_dim must be smaller than feature_dim")
        if self.users < 1 or self.items < 1 or self.latent_dim < 1:
            raise ValueError("users, items and latent_dim must be positive")
        if self.per_user > self.items:
            raise ValueError(f"per_user={self.per_user} exceeds items={self.items}")
        if self.per_user < 1:
            raise ValueError("per_user must be positive")


# --------------------------------------------------------------------------- interactions


def load_interactions(path: str | Path) -> InteractionSet:
    pairs: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3) or not cols[0] or not cols[1]:
                raise DataError(f"{path}:{lineno}: expected user<TAB>item[<TAB>timestamp], got {line!r}")
            if len(cols) == 3:
                try:
                    int(cols[2])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad timestamp {cols[2]!r}") from None
            pairs.append((cols[0], cols[1]))
    if not pairs:
        raise DataError(f"{path}: no interactions")
    return InteractionSet.from_pairs(pairs)


def interactions_text(data: InteractionSet) -> str:
    return "".join(f"{data.user_ids[u]}\t{data.item_ids[i]}\n" for u, i in data.records)


def save_interactions(path: str | Path, data: InteractionSet) -> None:
    Path(path).write_bytes(interactions_text(data).encode("utf-8"))


def _subset(data: InteractionSet, keep: np.ndarray) -> InteractionSet:
    """Restrict to ``records[keep]`` and re-densify indices in first-seen order."""
    recs = data.records[keep]
    _, u_first = np.unique(recs[:, 0], return_index=True)
    _, i_first = np.unique(recs[:, 1], return_index=True)
    u_order = recs[np.sort(u_first), 0]
    i_order = recs[np.sort(i_first), 1]
    u_map = np.full(data.n_users, -1, dtype=np.int64)
    i_map = np.full(data.n_items, -1, dtype=np.int64)
    u_map[u_order] = np.arange(len(u_order))
    i_map[i_order] = np.arange(len(i_order))
    new = np.stack([u_map[recs[:, 0]], i_map[recs[:, 1]]], axis=1) if len(recs) else recs
    return InteractionSet(
        tuple(data.user_ids[u] for u in u_order),
        tuple(data.item_ids[i] for i in i_order),
        new.astype(np.int64).reshape(-1, 2),
    )


def kcore_filter(data: InteractionSet, k: int) -> InteractionSet:
    """Prune users and items with degree < k until nothing changes.

    Raises :class:`EmptyAfterFiltering` when no interaction survives.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.ones(len(data.records), dtype=bool)
    u, i = data.records[:, 0], data.records[:, 1]
    while True:
        du = np.bincount(u[keep], minlength=data.n_users)
        di = np.bincount(i[keep], minlength=data.n_items)
        bad = keep & ((du[u] < k) | (di[i] < k))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise EmptyAfterFiltering(f"no interactions left after {k}-core filtering")
    return _subset(data, keep)


def split_811(data: InteractionSet, seed: int, mode: str = "per-user") -> DataSplit:
    """8:1:1 train/validation/test split.

    ``per-user``: each user's records are shuffled, floor(0.1 n) go to test,
    floor(0.1 n) to validation, the rest to train; users with n < 3 stay in
    train entirely. ``global``: the same rule over the whole record list, then
    any user left without a train record gets one moved back from test or
    validation.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    recs = data.records
    parts: dict[str, list[np.ndarray]] = {"train": [], "valid": [], "test": []}
    if mode == "per-user":
        order = np.argsort(recs[:, 0], kind="stable")
        bounds = np.searchsorted(recs[order, 0], np.arange(data.n_users + 1))
        for u in range(data.n_users):
            idx = order[bounds[u]:bounds[u + 1]]
            n = len(idx)
            idx = idx[rng.permutation(n)]
            n_hold = n // 10 if n >= 3 else 0
            parts["test"].append(idx[:n_hold])
            parts["valid"].append(idx[n_hold:2 * n_hold])
            parts["train"].append(idx[2 * n_hold:])
    elif mode == "global":
        n = len(recs)
        idx = rng.permutation(n)
        n_hold = n // 10
        test, valid, train = idx[:n_hold], idx[n_hold:2 * n_hold], idx[2 * n_hold:]
        has_train = np.zeros(data.n_users, dtype=bool)
        has_train[recs[train, 0]] = True
        moved = []
        for name, held in (("test", test), ("valid", valid)):
            keep_mask = np.ones(len(held), dtype=bool)
            for pos, r in enumerate(held):
                user = recs[r, 0]
                if not has_train[user]:
                    has_train[user] = True
                    keep_mask[pos] = False
                    moved.append(r)
            if name == "test":
                test = held[keep_mask]
            else:
                valid = held[keep_mask]
        train = np.concatenate([train, np.array(moved, dtype=np.int64)])
        parts = {"train": [train], "valid": [valid], "test": [test]}
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    def gather(chunks):
        idx = np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        return recs[idx.astype(np.int64)].reshape(-1, 2)

    return DataSplit(data, gather(parts["train"]), gather(parts["valid"]), gather(parts["test"]), seed)


def save_split(directory: str | Path, split: DataSplit) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for part in ("train", "valid", "test"):
        sub = InteractionSet(split.base.user_ids, split.base.item_ids, getattr(split, part))
        save_interactions(directory / f"{part}.tsv", sub)


def load_split(directory: str | Path, seed: int = 0) -> DataSplit:
    """Read ``train.tsv`` / ``valid.tsv`` / ``test.tsv`` into one index space.

    Index order follows first appearance across train, then valid, then test.
    """
    directory = Path(directory)
    raw: dict[str, list[tuple[str, str]]] = {}
    for part in ("train", "valid", "test"):
        p = directory / f"{part}.tsv"
        if part == "train" or p.exists():
            try:
                raw[part] = list(zip(*_read_pairs(p))) if p.stat().st_size else []
            except FileNotFoundError:
                raise DataError(f"missing split file {p}") from None
        else:
            raw[part] = []
    everything = raw["train"] + raw["valid"] + raw["test"]
    if not raw["train"]:
        raise DataError(f"{directory}/train.tsv has no interactions")
    base = InteractionSet.from_pairs(everything)
    um, im = base.user_index(), base.item_index()

    def arr(pairs):
        return np.array([(um[u], im[i]) for u, i in pairs], dtype=np.int64).reshape(-1, 2)

    return DataSplit(base, arr(raw["train"]), arr(raw["valid"]), arr(raw["test"]), seed)


def _read_pairs(path: Path) -> tuple[list[str], list[str]]:
    data = load_interactions(path)
    us = [data.user_ids[u] for u in data.records[:, 0]]
    its = [data.item_ids[i] for i in data.records[:, 1]]
    return us, its


# --------------------------------------------------------------------------- features


def features_bytes(features: np.ndarray, item_ids: Sequence[str]) -> bytes:
    """Encode the BEFA-F binary format (little-endian float32, id trailer)."""
    features = np.asarray(features)
    n, d = features.shape
    if len(item_ids) != n:
        raise DataError(f"{len(item_ids)} ids for {n} feature rows")
    if not np.all(np.isfinite(features)):
        raise DataError("refusing to write non-finite features")
    return (
        _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, _DTYPE_F32, n, d)
        + np.ascontiguousarray(features, dtype="<f4").tobytes()
        + "\n".join(item_ids).encode("utf-8")
    )


def save_features(path: str | Path, features: np.ndarray, item_ids: Sequence[str]) -> None:
    Path(path).write_bytes(features_bytes(features, item_ids))


def save_features_csv(path: str | Path, features: np.ndarray, item_ids: Sequence[str]) -> None:
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item"] + [f"f{j}" for j in range(features.shape[1])])
        for item, row in zip(item_ids, features):
            w.writerow([item] + [repr(float(x)) for x in row])


def _read_befa_f(path: Path) -> tuple[np.ndarray, list[str]]:
    blob = path.read_bytes()
    if len(blob) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, dtype, n, d = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION or dtype != _DTYPE_F32:
        raise DataError(f"{path}: unsupported version {version} / dtype {dtype}")
    start = _FEATURE_HEADER.size
    end = start + 4 * n * d
    if len(blob) < end:
        raise DataError(f"{path}: truncated feature payload")
    mat = np.frombuffer(blob, dtype="<f4", count=n * d, offset=start).reshape(n, d)
    trailer = blob[end:].decode("utf-8")
    ids = trailer.split("\n") if n else []
    if len(ids) != n:
        raise DataError(f"{path}: {len(ids)} ids in trailer for {n} rows")
    return mat.astype(np.float64), ids


def _read_csv(path: Path) -> tuple[np.ndarray, list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "item":
            raise DataError(f"{path}: expected header item,f0,...")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns")
            ids.append(row[0])
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value for item {row[0]!r}") from None
    mat = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    return mat, ids


def load_features(
    path: str | Path,
    expected_dim: int,
    item_ids: Sequence[str] | None = None,
    modality: str = "v",
) -> FeatureMatrix:
    """Load a feature file (BEFA-F binary or ``.csv``).

    With ``item_ids`` the rows are re-ordered to match those ids; every id must
    be present in the file.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        mat, ids = _read_csv(path)
    else:
        mat, ids = _read_befa_f(path)
    if mat.shape[1] != expected_dim:
        raise DataError(f"{path}: feature dim {mat.shape[1]} != expected {expected_dim}")
    bad = ~np.all(np.isfinite(mat), axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise DataError(f"{path}: non-finite value in row {row} (item {ids[row]!r})")
    if item_ids is None:
        return FeatureMatrix(mat, modality, tuple(ids))
    pos = {x: r for r, x in enumerate(ids)}
    order = []
    for item in item_ids:
        if item not in pos:
            raise DataError(f"{path}: missing feature row for item {item!r}")
        order.append(pos[item])
    return FeatureMatrix(mat[order], modality, tuple(item_ids))


# --------------------------------------------------------------------------- synthetic


def synth_generate(spec: SyntheticSpec, rng: np.random.Generator):
    """Planted latent-factor data with corrupted content features.

    Returns ``(interactions, raw, ideal)``. Ideal feature rows hold the item
    latent in their first ``latent_dim`` coordinates and zeros elsewhere. Raw
    rows start from the ideal; each item is drifted (informative block
    replaced by a random direction of equal norm) with probability
    ``drift_prob``, otherwise omitted (a random ``omit_frac`` of informative
    coordinates zeroed) with probability ``omit_prob``. Every raw row gets
    ``noise * N(0, 1)`` on the nuisance coordinates. The per-item corruption
    labels are stored on ``raw.corruption``.

    Items that no user sampled are dropped (their feature rows too), so every
    returned item has at least one interaction.
    """
    k, dm = spec.latent_dim, spec.feature_dim
    zu = rng.standard_normal((spec.users, k))
    zi = rng.standard_normal((spec.items, k))

    logits = zu @ zi.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    recs = []
    for u in range(spec.users):
        chosen = rng.choice(spec.items, size=spec.per_user, replace=False, p=probs[u])
        recs.extend((u, int(i)) for i in chosen)

    ideal = np.zeros((spec.items, dm))
    ideal[:, :k] = zi
    raw = ideal.copy()
    labels = np.zeros(spec.items, dtype=np.int64)
    n_omit = max(1, int(round(spec.omit_frac * k)))
    for i in range(spec.items):
        draw = rng.random()
        if draw < spec.drift_prob:
            v = rng.standard_normal(k)
            raw[i, :k] = v / np.linalg.norm(v) * np.linalg.norm(zi[i])
            labels[i] = 1
        elif draw < spec.drift_prob + (1.0 - spec.drift_prob) * spec.omit_prob:
            raw[i, rng.choice(k, size=n_omit, replace=False)] = 0.0
            labels[i] = 2
    raw[:, k:] = spec.noise * rng.standard_normal((spec.items, dm - k))

    records = np.array(recs, dtype=np.int64)
    present = np.unique(records[:, 1])
    remap = np.full(spec.items, -1, dtype=np.int64)
    remap[present] = np.arange(len(present))
    records[:, 1] = remap[records[:, 1]]

    user_ids = tuple(f"u{u}" for u in range(spec.users))
    item_ids = tuple(f"i{i}" for i in present)
    interactions = InteractionSet(user_ids, item_ids, records)
    raw_fm = FeatureMatrix(raw[present], "v", item_ids, labels[present])
    return interactions, raw_fm, FeatureMatrix(ideal[present], "v", item_ids)
