"""Deviation between observed content features and known ideal features:
angle, effective component, cosine error and its mean over items."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .recmodel import Recommender


class NoIncludedItems(ValueError):
    """Every row pair had a zero vector, so the mean deviation is undefined."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not np.any(a) or not np.any(b):
        raise ValueError("deviation is undefined for a zero vector")
    return a, b


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    # sqrt(|a|^2 |b|^2) rather than |a| |b|: exact +-1 for (anti)parallel pairs
    c = float(np.dot(a, b) / math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b))))
    return min(1.0, max(-1.0, c))


def deviation_angle(ideal, observed) -> float:
    """Angle in [0, pi] between the ideal and observed feature."""
    a, b = _pair(ideal, observed)
    return math.acos(_cos(a, b))


def effective_component(observed, ideal) -> tuple[float, np.ndarray]:
    """Signed length of ``observed`` along the ideal direction, and that
    component as a vector."""
    o, i = _pair(observed, ideal)
    scalar = float(np.linalg.norm(o)) * _cos(o, i)
    return scalar, scalar * (i / np.linalg.norm(i))


def feature_error(observed, ideal) -> float:
    """``1 - cos`` between observed and ideal, in [0, 2]."""
    o, i = _pair(observed, ideal)
    return 1.0 - _cos(o, i)


def _row_cosines(observed: np.ndarray, ideal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    no = np.einsum("nd,nd->n", observed, observed)
    ni = np.einsum("nd,nd->n", ideal, ideal)
    ok = (no > 0) & (ni > 0)
    cos = np.full(len(observed), np.nan)
    cos[ok] = np.einsum("nd,nd->n", observed[ok], ideal[ok]) / np.sqrt(no[ok] * ni[ok])
    return np.clip(cos, -1.0, 1.0), ok


def expected_deviation(observed, ideal) -> float:
    """Mean cosine error over items, skipping rows where either side is zero."""
    return deviation_report(observed, ideal).delta


@dataclass
class DeviationReport:
    theta: np.ndarray
    error: np.ndarray
    effective: np.ndarray
    included: np.ndarray
    delta: float
    labels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=object))

    @property
    def skipped(self) -> int:
        return int((~self.included).sum())

    def histogram(self, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.error[self.included], bins=bins, range=(0.0, 2.0))

    def label_counts(self) -> dict[str, int]:
        names, counts = np.unique(self.labels[self.included], return_counts=True)
        return {str(n): int(c) for n, c in zip(names, counts)}

    def to_dict(self) -> dict:
        counts, edges = self.histogram()
        inc = self.included
        return {
            "delta": self.delta,
            "items": int(inc.sum()),
            "skipped": self.skipped,
            "mean_theta": float(self.theta[inc].mean()),
            "mean_effective": float(self.effective[inc].mean()),
            "error_histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
            "heuristic_labels": self.label_counts(),
        }


def deviation_report(observed, ideal, omission_threshold: float = 0.9) -> DeviationReport:
    """Per-item deviation diagnostics plus the mean error over included items.

    ``labels`` is a heuristic reading of each angle: ``drift`` when the
    cosine is <= 0, ``omission`` when it lies in (0, omission_threshold),
    otherwise ``ok``.
    """
    observed = np.asarray(observed, dtype=np.float64)
    ideal = np.asarray(ideal, dtype=np.float64)
    if observed.shape != ideal.shape:
        raise ValueError(f"shape mismatch: {observed.shape} vs {ideal.shape}")
    cos, ok = _row_cosines(observed, ideal)
    if not ok.any():
        raise NoIncludedItems("no item has non-zero observed and ideal features")
    theta = np.where(ok, np.arccos(np.where(ok, cos, 1.0)), np.nan)
    error = np.where(ok, 1.0 - np.where(ok, cos, 1.0), np.nan)
    effective = np.where(ok, np.linalg.norm(observed, axis=1) * np.where(ok, cos, 0.0), np.nan)
    labels = np.where(cos <= 0, "drift", np.where(cos < omission_threshold, "omission", "ok")).astype(object)
    labels[~ok] = "skipped"
    delta = math.fsum(error[ok]) / int(ok.sum())
    return DeviationReport(theta, error, effective, ok, delta, labels)


def aligned_features(features: np.ndarray, ideal: np.ndarray, folds: int = 2) -> np.ndarray:
    """Cross-fitted least-squares linear map from ``features`` to ``ideal``.

    Items are split into ``folds`` groups by index; each group is mapped with
    the affine map fitted on the other groups, so no row is scored by a map
    that saw it.
    """
    features = np.asarray(features, dtype=np.float64)
    ideal = np.asarray(ideal, dtype=np.float64)
    x = np.hstack([features, np.ones((len(features), 1))])
    group = np.arange(len(features)) % folds
    out = np.zeros_like(ideal)
    for g in range(folds):
        fit = group != g
        coef, *_ = np.linalg.lstsq(x[fit], ideal[fit], rcond=None)
        out[~fit] = x[~fit] @ coef
    return out


def adapter_deviation_report(
    model: Recommender,
    raw: np.ndarray,
    ideal: np.ndarray,
    modality: str | None = None,
    frame: str = "identity",
) -> tuple[DeviationReport, DeviationReport]:
    """Deviation of the raw features and of the eval-mode adapted features
    from the ideal ones.

    ``frame="identity"`` compares coordinates as they are. ``frame="aligned"``
    first maps each feature matrix onto the ideal coordinates with its own
    cross-fitted least-squares map (:func:`aligned_features`), which removes
    the arbitrary linear frame the host's fusion projection can absorb.
    """
    modality = modality or model.modalities[0]
    raw = np.asarray(raw, dtype=np.float64)
    ideal = np.asarray(ideal, dtype=np.float64)
    if raw.shape != ideal.shape:
        raise ValueError(f"raw {raw.shape} and ideal {ideal.shape} features differ in shape")
    adapted = model.adapters[modality].forward(raw, model.item_emb)[0]
    if adapted.shape != ideal.shape:
        raise ValueError("adapted features do not live in the ideal feature space")
    if frame == "aligned":
        raw, adapted = aligned_features(raw, ideal), aligned_features(adapted, ideal)
    elif frame != "identity":
        raise ValueError(f"unknown frame {frame!r}")
    return deviation_report(raw, ideal), deviation_report(adapted, ideal)


def report_table(reports: dict[str, DeviationReport]) -> str:
    width = max(12, *(len(n) for n in reports))
    lines = [f"{'features':<{width}} {'Delta':>8} {'mean theta':>11} {'items':>6} {'skipped':>8}"]
    for name, r in reports.items():
        inc = r.included
        lines.append(f"{name:<{width}} {r.delta:>8.4f} {float(r.theta[inc].mean()):>11.4f} {int(inc.sum()):>6} {r.skipped:>8}")
    return "\n".join(lines)


def reports_json(reports: dict[str, DeviationReport]) -> str:
    return json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True)
