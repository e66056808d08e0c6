import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from befa.dataio import DataSplit, InteractionSet
from befa.numkit import make_rng
from befa.recmodel import Recommender
from befa.trainer import (
    AdamState,
    CheckpointError,
    NegativeSampler,
    TrainConfig,
    adam_step,
    adam_update,
    bpr_loss_and_grads,
    load_checkpoint,
    load_into,
    model_from_checkpoint,
    sample_negatives,
    save_checkpoint,
    snapshot,
    train,
)
from befa.evaluator import evaluate
from oracles import central_difference, relative_error, scalar_adam
from toy import toy


def test_bpr_loss_at_equal_scores_is_ln2():
    m = Recommender(np.ones((1, 2)), np.ones((2, 2)))
    loss, _ = bpr_loss_and_grads(m, {}, [0], [0], [1], reg=0.0)
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)


def test_bpr_loss_vanishes_for_large_margin():
    m = Recommender(np.array([[1.0, 0.0]]), np.array([[400.0, 0.0], [-400.0, 0.0]]))
    loss, grads = bpr_loss_and_grads(m, {}, [0], [0], [1], reg=0.0)
    assert loss < 1e-300 and np.all(np.isfinite(grads["user_emb"]))


@settings(max_examples=20)
@given(st.sampled_from(["none", "befa", "lora", "prompt"]), st.integers(0, 2**32))
def test_bpr_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    m = Recommender.create(4, 6, 3, {"v": 4}, make_rng(seed), adapter=kind, d_a=5, dropout=0.0)
    for p in m.params().values():
        p[...] = 0.7 * rng.normal(size=p.shape)
    feats = {"v": rng.normal(size=(6, 4))}
    users, pos, neg = rng.integers(0, 4, 8), rng.integers(0, 6, 8), rng.integers(0, 6, 8)

    def loss():
        return bpr_loss_and_grads(m, feats, users, pos, neg, reg=0.05)[0]

    _, grads = bpr_loss_and_grads(m, feats, users, pos, neg, reg=0.05)
    for name, p in m.params().items():
        assert relative_error(grads[name], central_difference(loss, p)) < 1e-5, name


def test_sampler_two_items_forced():
    train_recs = np.array([[0, 0]])
    rng = make_rng(0)
    assert all(sample_negatives(0, train_recs, 2, rng) == 1 for _ in range(50))


def test_sampler_is_uniform_over_non_positives():
    train_recs = np.array([[0, 0], [1, 3]])
    sampler = NegativeSampler(train_recs, 2, 10)
    draws = sampler.sample(np.zeros(10_000, dtype=np.int64), make_rng(4))
    assert not np.any(draws == 0)
    counts = np.bincount(draws, minlength=10)[1:]
    expected = 10_000 / 9
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 99.9% quantile of chi-square with 8 degrees of freedom
    assert chi2 < 26.12


def test_sampler_determinism_and_full_user_error():
    train_recs = np.array([[0, 0], [0, 1], [1, 0]])
    s = NegativeSampler(train_recs, 2, 2)
    a = s.sample([1, 1, 1], make_rng(3))
    assert np.array_equal(a, s.sample([1, 1, 1], make_rng(3)))
    with pytest.raises(ValueError):
        s.sample([0], make_rng(0))


@given(st.lists(st.floats(-5, 5).filter(lambda g: abs(g) > 1e-6), min_size=1, max_size=10), st.floats(0.1, 3))
def test_adam_matches_scalar_reference(grads, start):
    p = np.array([start])
    state = AdamState(lr=1e-3)
    for g in grads:
        adam_step({"x": p}, {"x": np.array([g])}, state)
    assert p[0] == pytest.approx(scalar_adam(start, grads), rel=1e-12, abs=1e-15)


def test_adam_first_step_is_about_lr_and_zero_grad_is_inert():
    p = np.array([1.0, 2.0])
    state = AdamState(lr=1e-3)
    adam_step({"x": p}, {"x": np.array([0.3, -4.0])}, state)
    assert np.allclose(np.abs(p - [1.0, 2.0]), 1e-3, rtol=1e-6)
    q = np.array([5.0])
    state = AdamState()
    for _ in range(20):
        adam_step({"q": q}, {"q": np.zeros(1)}, state)
    assert q[0] == 5.0
    with pytest.raises(ValueError):
        adam_update("x", np.zeros(2), np.zeros(3), AdamState(t=1))


@pytest.mark.parametrize("kw", [dict(patience=0), dict(epochs=3, patience=5), dict(dropout=1.0), dict(adapter="gru")])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = TrainConfig(dim=8, ks=(5, 10))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"dim": 8, "width": 3})


FAST = dict(dim=8, batch_size=128, lr=0.01, epochs=12, patience=12)


def test_toy_run_loss_decreases_and_is_deterministic():
    split, feats, _ = toy(7)
    cfg = TrainConfig(adapter="befa", seed=7, **FAST)
    ck1, rep1 = train(split, feats, cfg)
    ck2, rep2 = train(split, feats, cfg)
    assert rep1[9].loss < rep1[0].loss
    assert ck1 == ck2
    assert [r.loss for r in rep1] == [r.loss for r in rep2]


def test_checkpoint_round_trip(tmp_path):
    split, feats, _ = toy(7)
    cfg = TrainConfig(adapter="befa", seed=7, **{**FAST, "epochs": 3, "patience": 3})
    ck, reports = train(split, feats, cfg)
    save_checkpoint(tmp_path / "m.befc", ck)
    back = load_checkpoint(tmp_path / "m.befc")
    assert back == ck
    model = model_from_checkpoint(back)
    recall = evaluate(model, split, feats, part="valid").recall[20]
    assert recall == reports[ck.epoch - 1].valid_recall


def test_checkpoint_errors(tmp_path):
    split, feats, _ = toy(7)
    cfg = TrainConfig(adapter="befa", seed=7, **{**FAST, "epochs": 1, "patience": 1})
    ck, _ = train(split, feats, cfg)
    path = tmp_path / "m.befc"
    save_checkpoint(path, ck)
    blob = path.read_bytes()
    (tmp_path / "cut.befc").write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(tmp_path / "cut.befc")
    (tmp_path / "junk.befc").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "junk.befc")
    with pytest.raises(CheckpointError):
        model_from_checkpoint(ck, expect_adapter="none")
    plain = Recommender.create(split.n_users, split.n_items, 8, {"v": feats["v"].shape[1]}, make_rng(0))
    before = plain.user_emb.copy()
    with pytest.raises(CheckpointError):
        load_into(plain, ck)
    assert np.array_equal(plain.user_emb, before)


def test_save_is_atomic_on_failure(tmp_path, monkeypatch):
    split, feats, _ = toy(7)
    ck, _ = train(split, feats, TrainConfig(adapter="none", seed=7, **{**FAST, "epochs": 1, "patience": 1}))
    path = tmp_path / "m.befc"
    save_checkpoint(path, ck)
    good = path.read_bytes()
    import befa.trainer as tr

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(tr.os, "replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, snapshot(model_from_checkpoint(ck), TrainConfig(adapter="none"), 9, {}))
    assert path.read_bytes() == good
    assert [p.name for p in tmp_path.iterdir()] == ["m.befc"]


def test_early_stopping_fires_within_patience():
    # a tiny, unregularised, high-learning-rate model overfits quickly
    split, feats, _ = toy(7)
    cfg = TrainConfig(adapter="befa", seed=7, dim=32, reg=0.0, lr=0.1, batch_size=64, epochs=200, patience=4)
    ck, reports = train(split, feats, cfg)
    assert len(reports) < cfg.epochs
    assert len(reports) - ck.epoch <= cfg.patience + 1
    best = max(r.valid_recall for r in reports)
    assert reports[ck.epoch - 1].valid_recall == best


def test_empty_validation_trains_all_epochs(caplog):
    recs = np.array([[u, i] for u in range(3) for i in range(3) if (u + i) % 2 == 0])
    base = InteractionSet(("a", "b", "c"), ("x", "y", "z"), recs)
    split = DataSplit(base, recs, np.empty((0, 2), np.int64), np.empty((0, 2), np.int64), 0)
    cfg = TrainConfig(adapter="none", dim=2, epochs=3, patience=1)
    ck, reports = train(split, {}, cfg)
    assert len(reports) == 3 and ck.epoch == 3
    assert "validation" in caplog.text
