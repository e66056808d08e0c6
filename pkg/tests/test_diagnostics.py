import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from befa.adapters import BefaAdapter
from befa.diagnostics import (
    NoIncludedItems,
    adapter_deviation_report,
    aligned_features,
    deviation_angle,
    deviation_report,
    effective_component,
    expected_deviation,
    feature_error,
    report_table,
    reports_json,
)
from befa.numkit import make_rng
from befa.recmodel import Recommender
from oracles import brute_cosine

vec = arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_angle_examples():
    x = np.array([1.0, 2.0, -3.0])
    assert deviation_angle(x, x) == 0.0
    assert deviation_angle(x, -x) == math.pi
    assert deviation_angle([1.0, 0.0], [1.0, 1.0]) == pytest.approx(math.pi / 4, abs=1e-15)
    with pytest.raises(ValueError):
        deviation_angle([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        deviation_angle([1.0], [1.0, 0.0])


def test_effective_component_examples():
    s, v = effective_component([0.0, 2.0], [1.0, 0.0])
    assert s == 0.0 and np.array_equal(v, [0.0, 0.0])
    ideal = np.array([1.0, 2.0, 2.0])
    s, _ = effective_component(2 * ideal, ideal)
    assert s == pytest.approx(2 * 3.0, rel=1e-15)
    s, v = effective_component([3.0, 4.0], [1.0, 0.0])
    assert s == pytest.approx(3.0, rel=1e-15) and np.allclose(v, [3.0, 0.0], atol=1e-15)


def test_error_examples():
    x = np.array([0.5, -1.0])
    assert feature_error(x, x) == pytest.approx(0.0, abs=1e-15)
    assert feature_error(-x, x) == 2.0
    assert feature_error([1.0, 0.0], [0.0, 1.0]) == 1.0


@given(vec, vec)
def test_error_is_one_minus_cos_theta(a, b):
    assert abs(feature_error(a, b) - (1.0 - math.cos(deviation_angle(b, a)))) < 1e-12
    assert abs(feature_error(a, b) - (1.0 - brute_cosine(a, b))) < 1e-12


def test_mean_deviation_examples():
    ideal = np.random.default_rng(0).normal(size=(5, 3))
    assert expected_deviation(ideal, ideal) == pytest.approx(0.0, abs=1e-15)
    obs = np.array([[1.0, 0.0], [0.0, 1.0]])
    ide = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert expected_deviation(obs, ide) == 0.5


@given(arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), st.integers(0, 4))
def test_mean_deviation_drops_when_a_row_is_fixed(obs, ideal, row):
    ok = (np.linalg.norm(obs, axis=1) > 1e-3) & (np.linalg.norm(ideal, axis=1) > 1e-3)
    if not ok.all():
        return
    before = deviation_report(obs, ideal)
    if before.error[row] <= 1e-9:
        return
    fixed = obs.copy()
    fixed[row] = ideal[row]
    assert expected_deviation(fixed, ideal) < before.delta


def test_zero_rows_are_skipped_and_all_zero_is_an_error():
    obs = np.array([[0.0, 0.0], [1.0, 0.0]])
    ide = np.array([[1.0, 0.0], [0.0, 1.0]])
    r = deviation_report(obs, ide)
    assert r.skipped == 1 and r.delta == 1.0
    assert r.labels[0] == "skipped"
    with pytest.raises(NoIncludedItems):
        deviation_report(np.zeros((2, 2)), ide)


def test_report_labels_and_serialisation():
    ide = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    obs = np.array([[1.0, 0.0], [1.0, 1.0], [-1.0, 0.2]])
    r = deviation_report(obs, ide)
    assert r.labels.tolist() == ["ok", "omission", "drift"]
    assert r.label_counts() == {"drift": 1, "omission": 1, "ok": 1}
    text = report_table({"raw": r})
    assert "raw" in text and "Delta" in text
    assert '"delta"' in reports_json({"raw": r})


def test_untrained_adapter_gives_half_rows():
    model = Recommender(np.ones((1, 3)), np.ones((4, 3)), {"v": np.zeros((3, 3))})
    ad = BefaAdapter(3, 3, 3, make_rng(0), identity_gate=True, identity_merge=True)
    for p in ad.params.values():
        p[...] = 0.0
    model.adapters["v"] = ad
    raw = np.random.default_rng(0).normal(size=(4, 3))
    ideal = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(ad.forward(raw, model.item_emb)[0], np.full((4, 3), 0.5))
    raw_rep, ad_rep = adapter_deviation_report(model, raw, ideal)
    assert math.isfinite(ad_rep.delta) and math.isfinite(raw_rep.delta)


def test_aligned_frame_is_cross_fitted():
    rng = np.random.default_rng(0)
    ideal = rng.normal(size=(40, 3))
    mix = rng.normal(size=(3, 3))
    out = aligned_features(ideal @ mix, ideal)
    # an exact linear relation is recovered on held-out rows
    assert np.allclose(out, ideal, atol=1e-9)
