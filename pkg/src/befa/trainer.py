"""BPR training with Adam, negative sampling, early stopping and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .adapters import AdapterKind, adapter_from_config
from .dataio import DataSplit
from .evaluator import NoEvaluableUsers, evaluate
from .numkit import log_sigmoid, sigmoid
from .recmodel import Recommender

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BEFC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    dim: int = 64
    reg: float = 1e-4
    batch_size: int = 2048
    epochs: int = 1000
    patience: int = 10
    lr: float = 1e-3
    da_mult: float = 4.0
    dropout: float = 0.1
    adapter: str = "befa"
    seed: int = 0
    lora_rank: int = 4
    stop_grad_behavior: bool = False
    relu_after_gate: bool = False
    identity_gate: bool = False
    identity_merge: bool = False
    projection_bias: bool = False
    ks: tuple[int, ...] = (10, 20)
    select_k: int = 20
    deterministic: bool = False

    def __post_init__(self):
        self.adapter = AdapterKind(self.adapter).value
        self.ks = tuple(int(k) for k in self.ks)
        for name in ("dim", "batch_size", "epochs", "patience", "lora_rank", "select_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.reg < 0 or self.lr < 0 or self.da_mult <= 0:
            raise ValueError("reg and lr must be >= 0, da_mult > 0")
        if self.patience > self.epochs:
            raise ValueError("patience cannot exceed epochs")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_a(self) -> int:
        return max(1, int(round(self.da_mult * self.dim)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ks"] = list(self.ks)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochReport:
    epoch: int
    loss: float
    valid_recall: float
    valid_ndcg: float
    seconds: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(name: str, param: np.ndarray, grad: np.ndarray, state: AdamState) -> None:
    """One bias-corrected Adam update of ``param`` in place.

    The caller advances ``state.t`` once per optimizer step before updating
    the parameters of that step.
    """
    if param.shape != grad.shape:
        raise ValueError(f"{name}: grad shape {grad.shape} != param shape {param.shape}")
    if name not in state.m:
        state.m[name] = np.zeros_like(param)
        state.v[name] = np.zeros_like(param)
    m, v = state.m[name], state.v[name]
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** state.t)
    v_hat = v / (1.0 - state.beta2 ** state.t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    state.t += 1
    for name in params:
        adam_update(name, params[name], grads[name], state)


# --------------------------------------------------------------------------- sampling


class NegativeSampler:
    """Uniform negatives among items the user has no train interaction with."""

    def __init__(self, train: np.ndarray, n_users: int, n_items: int):
        self.n_items = n_items
        self.codes = np.unique(train[:, 0] * n_items + train[:, 1])
        counts = np.bincount(train[:, 0], minlength=n_users)
        self.full_users = np.flatnonzero(counts >= n_items)

    def is_positive(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        codes = users * self.n_items + items
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == codes

    def sample(self, users, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if np.isin(users, self.full_users).any():
            raise ValueError("a user in the batch has interacted with every item")
        out = rng.integers(0, self.n_items, size=len(users))
        bad = self.is_positive(users, out)
        while bad.any():
            out[bad] = rng.integers(0, self.n_items, size=int(bad.sum()))
            bad[bad] = self.is_positive(users[bad], out[bad])
        return out


def sample_negatives(u: int, train: np.ndarray, n_items: int, rng: np.random.Generator) -> int:
    """Single-user convenience wrapper around :class:`NegativeSampler`."""
    return int(NegativeSampler(train, int(train[:, 0].max()) + 1 if len(train) else u + 1, n_items).sample([u], rng)[0])


# --------------------------------------------------------------------------- BPR


def bpr_loss_and_grads(
    model: Recommender,
    features: Mapping[str, np.ndarray],
    users,
    pos,
    neg,
    reg: float,
    rng: np.random.Generator | None = None,
):
    """Mean BPR loss plus L2 on the touched embedding rows, with exact grads.

    ``rng=None`` evaluates adapters without dropout.
    """
    users = np.asarray(users, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    b = len(users)
    items, inv = np.unique(np.concatenate([pos, neg]), return_inverse=True)
    reps, tape = model.item_forward(items, features, rng)
    hu = model.user_emb[users]
    diff = reps[inv[:b]] - reps[inv[b:]]
    x = np.einsum("nd,nd->n", hu, diff)
    hp, hn = model.item_emb[pos], model.item_emb[neg]
    sq = (hu * hu).sum(axis=1) + (hp * hp).sum(axis=1) + (hn * hn).sum(axis=1)
    loss = float(-log_sigmoid(x).mean() + reg * sq.mean())

    dx = -sigmoid(-x) / b
    d_reps = np.zeros_like(reps)
    np.add.at(d_reps, inv[:b], dx[:, None] * hu)
    np.add.at(d_reps, inv[b:], -dx[:, None] * hu)
    grads = model.item_backward(tape, d_reps)
    c = 2.0 * reg / b
    np.add.at(grads["user_emb"], users, dx[:, None] * diff + c * hu)
    np.add.at(grads["item_emb"], pos, c * hp)
    np.add.at(grads["item_emb"], neg, c * hn)
    return loss, grads


def bpr_step(
    model: Recommender,
    features: Mapping[str, np.ndarray],
    batch,
    adam: AdamState,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """Forward, backward and one Adam update on a ``(users, pos, neg)`` batch."""
    users, pos, neg = batch
    loss, grads = bpr_loss_and_grads(model, features, users, pos, neg, config.reg, rng)
    adam_step(model.params(), grads, adam)
    return loss


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    model: dict
    epoch: int
    rng_state: dict

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.config == other.config
            and self.model == other.model
            and self.epoch == other.epoch
            and self.rng_state == other.rng_state
            and list(self.tensors) == list(other.tensors)
            and all(
                self.tensors[k].shape == other.tensors[k].shape
                and self.tensors[k].tobytes() == other.tensors[k].tobytes()
                for k in self.tensors
            )
        )


def model_meta(model: Recommender) -> dict:
    return {
        "n_users": model.n_users,
        "n_items": model.n_items,
        "dim": model.dim,
        "stop_grad_behavior": model.stop_grad_behavior,
        "adapter_kind": model.adapter_kind.value,
        "modalities": {m: model.adapters[m].config() for m in model.modalities},
    }


def snapshot(model: Recommender, config: TrainConfig, epoch: int, rng_state: dict) -> Checkpoint:
    tensors = {k: v.copy() for k, v in model.params().items()}
    return Checkpoint(tensors, config.to_dict(), model_meta(model), epoch, rng_state)


def model_from_checkpoint(ckpt: Checkpoint, expect_adapter: AdapterKind | str | None = None) -> Recommender:
    meta = ckpt.model
    kind = AdapterKind(meta["adapter_kind"])
    if expect_adapter is not None and AdapterKind(expect_adapter) is not kind:
        raise CheckpointError(f"checkpoint holds a {kind.value!r} model, expected {AdapterKind(expect_adapter).value!r}")
    t = ckpt.tensors
    fusion, adapters = {}, {}
    for m, cfg in meta["modalities"].items():
        fusion[m] = t[f"fusion/{m}"].copy()
        prefix = f"adapter/{m}/"
        ad_params = {k[len(prefix):]: v.copy() for k, v in t.items() if k.startswith(prefix)}
        adapters[m] = adapter_from_config(cfg, ad_params)
    model = Recommender(
        t["user_emb"].copy(), t["item_emb"].copy(), fusion, adapters, stop_grad_behavior=meta["stop_grad_behavior"]
    )
    if set(model.params()) != set(t):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    return model


def load_into(model: Recommender, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into an existing model of the same layout."""
    if model.adapter_kind.value != ckpt.model["adapter_kind"]:
        raise CheckpointError(
            f"checkpoint adapter {ckpt.model['adapter_kind']!r} does not match model adapter {model.adapter_kind.value!r}"
        )
    params = model.params()
    if set(params) != set(ckpt.tensors):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for k, p in params.items():
        if p.shape != ckpt.tensors[k].shape:
            raise CheckpointError(f"{k}: shape {ckpt.tensors[k].shape} != {p.shape}")
    for k, p in params.items():
        p[...] = ckpt.tensors[k]


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """``BEFC`` | u8 version | u32 header length | JSON header | f64 payloads."""
    directory, payload, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config,
        "model": ckpt.model,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "tensors": directory,
        "payload_bytes": offset,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(hdr)) + hdr + b"".join(payload)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    _atomic_write(Path(path), checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 9 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 9 + hlen
    if len(blob) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[9:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if len(blob) != start + header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(blob) - start} bytes, expected {header['payload_bytes']}")
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=start + entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return Checkpoint(tensors, header["config"], header["model"], header["epoch"], header["rng_state"])


# --------------------------------------------------------------------------- training loop


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(data stream for shuffling/negatives, model stream for init/dropout).

    Separate streams keep negatives identical across adapter variants.
    """
    data_ss, model_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(data_ss)), np.random.Generator(np.random.PCG64(model_ss))


def build_model(split: DataSplit, feature_dims: Mapping[str, int], config: TrainConfig, rng: np.random.Generator) -> Recommender:
    return Recommender.create(
        split.n_users,
        split.n_items,
        config.dim,
        feature_dims,
        rng,
        adapter=config.adapter,
        d_a=config.d_a,
        dropout=config.dropout,
        lora_rank=config.lora_rank,
        identity_gate=config.identity_gate,
        identity_merge=config.identity_merge,
        relu_after_gate=config.relu_after_gate,
        projection_bias=config.projection_bias,
        stop_grad_behavior=config.stop_grad_behavior,
    )


def train(
    split: DataSplit,
    features: Mapping[str, np.ndarray],
    config: TrainConfig,
    on_epoch: Callable[[EpochReport], None] | None = None,
) -> tuple[Checkpoint, list[EpochReport]]:
    """Train until ``config.epochs`` or until validation Recall@``select_k``
    has not improved for ``config.patience`` epochs.

    Returns the checkpoint of the best validation epoch and every epoch's
    report. Without validation data early stopping is off and the last epoch
    is returned.
    """
    data_rng, model_rng = rng_streams(config.seed)
    feats = {m: np.asarray(f, dtype=np.float64) for m, f in features.items()}
    model = build_model(split, {m: f.shape[1] for m, f in feats.items()}, config, model_rng)
    adam = AdamState(lr=config.lr)
    sampler = NegativeSampler(split.train, split.n_users, split.n_items)
    has_valid = len(split.valid) > 0
    if not has_valid:
        logger.warning("empty validation set: early stopping disabled, training %d epochs", config.epochs)
    ks = tuple(sorted(set(config.ks) | {config.select_k}))

    reports: list[EpochReport] = []
    best: Checkpoint | None = None
    best_recall = -np.inf
    since_best = 0
    train_recs = split.train
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = data_rng.permutation(len(train_recs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            users, pos = train_recs[idx, 0], train_recs[idx, 1]
            neg = sampler.sample(users, data_rng)
            loss = bpr_step(model, feats, (users, pos, neg), adam, config, model_rng if config.dropout > 0 else None)
            total += loss * len(idx)
        mean_loss = total / len(order)
        recall = ndcg = float("nan")
        if has_valid:
            try:
                mt = evaluate(model, split, feats, ks=ks, part="valid")
                recall, ndcg = mt.recall[config.select_k], mt.ndcg[config.select_k]
            except NoEvaluableUsers:
                has_valid = False
        report = EpochReport(epoch, mean_loss, recall, ndcg, time.perf_counter() - t0)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report)

        rng_state = {"data": data_rng.bit_generator.state, "model": model_rng.bit_generator.state}
        if not has_valid:
            best = snapshot(model, config, epoch, rng_state)
            continue
        if recall > best_recall:
            best_recall = recall
            best = snapshot(model, config, epoch, rng_state)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best.epoch)
                break
    assert best is not None
    return best, reports
