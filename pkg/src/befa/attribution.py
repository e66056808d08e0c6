"""Similarity-weighted activation heatmaps.

Each of the N activation grids ``a_l`` of an item image is weighted by the
cosine similarity between the content feature of the matching masked image
(``x_l``) and the item's behavioral embedding ``h_i``; the heatmap is the
weighted sum of the grids. Activations and masked-image features are produced
outside this package and read from a bundle directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .numkit import bilinear_upsample
from .recmodel import Recommender

Projector = Callable[[np.ndarray], np.ndarray]


@dataclass
class AttributionBundle:
    activations: np.ndarray  # (N, H, W)
    mask_features: np.ndarray  # (N, d_m)
    behavioral: np.ndarray  # (d,)
    export_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=np.float64)
        self.mask_features = np.asarray(self.mask_features, dtype=np.float64)
        self.behavioral = np.asarray(self.behavioral, dtype=np.float64)
        if self.activations.ndim != 3 or len(self.activations) < 1:
            raise ValueError("activations must be a non-empty (N, H, W) stack")
        if self.mask_features.ndim != 2 or len(self.mask_features) != len(self.activations):
            raise ValueError("need one feature vector per activation grid")
        if self.behavioral.ndim != 1:
            raise ValueError("behavioral feature must be a vector")

    @property
    def n_masks(self) -> int:
        return len(self.activations)


@dataclass
class Heatmap:
    grid: np.ndarray
    weights: np.ndarray | None = None

    def normalized(self) -> np.ndarray:
        """Min-max scaled copy in [0, 1]; a constant grid maps to zeros."""
        lo, hi = float(self.grid.min()), float(self.grid.max())
        if hi == lo:
            return np.zeros_like(self.grid)
        return (self.grid - lo) / (hi - lo)


def cosine_similarity(x, h) -> float:
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.shape != h.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {h.shape}")
    nx, nh = np.linalg.norm(x), np.linalg.norm(h)
    if nx == 0.0 or nh == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(x, h) / (nx * nh), -1.0, 1.0))


def mask_weights(bundle: AttributionBundle, projector: Projector | None = None) -> np.ndarray:
    feats = bundle.mask_features
    if projector is not None:
        feats = np.asarray(projector(feats), dtype=np.float64)
    if feats.shape[1] != bundle.behavioral.shape[0]:
        raise ValueError(
            f"mask features have dim {feats.shape[1]} but behavioral dim is {bundle.behavioral.shape[0]}; "
            "a projector is required"
        )
    return np.array([cosine_similarity(x, bundle.behavioral) for x in feats])


def compute_heatmap(bundle: AttributionBundle, projector: Projector | None = None) -> Heatmap:
    """Weighted sum of activation grids; negative weights are kept as is."""
    w = mask_weights(bundle, projector)
    grid = np.zeros(bundle.activations.shape[1:])
    # fixed summation order keeps results reproducible
    for weight, act in zip(w, bundle.activations):
        grid += weight * act
    return Heatmap(grid, w)


def bundle_projector(model: Recommender, modality: str, bundle: AttributionBundle, through_adapter: bool = False) -> Projector:
    """Map mask features into the behavioral space with the trained fusion
    projection of ``modality``; with ``through_adapter`` they first pass the
    eval-mode adapter, gated by the bundle's behavioral vector."""
    t = model.fusion[modality]
    adapter = model.adapters[modality]
    h = np.broadcast_to(bundle.behavioral, (bundle.n_masks, bundle.behavioral.shape[0]))

    def project(x: np.ndarray) -> np.ndarray:
        if through_adapter:
            x = adapter.forward(x, h)[0]
        return x @ t.T

    return project


# --------------------------------------------------------------------------- files


def _read_f32(path: Path, count: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != count:
        raise ValueError(f"{path}: expected {count} float32 values, found {data.size}")
    return data.astype(np.float64)


def load_bundle(directory: str | Path) -> AttributionBundle:
    """Read ``meta.json``, ``activations.bin``, ``mask_features.bin`` and
    ``behavioral.bin`` (little-endian float32) from ``directory``."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    n, h, w, dm, d = (int(meta[k]) for k in ("N", "H", "W", "d_m", "d"))
    acts = _read_f32(directory / "activations.bin", n * h * w).reshape(n, h, w)
    feats = _read_f32(directory / "mask_features.bin", n * dm).reshape(n, dm)
    beh = _read_f32(directory / "behavioral.bin", d)
    size = meta.get("export_size")
    return AttributionBundle(acts, feats, beh, tuple(size) if size else None)


def save_bundle(directory: str | Path, bundle: AttributionBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, h, w = bundle.activations.shape
    meta = {"N": n, "H": h, "W": w, "d_m": bundle.mask_features.shape[1], "d": bundle.behavioral.shape[0]}
    if bundle.export_size:
        meta["export_size"] = list(bundle.export_size)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    bundle.activations.astype("<f4").tofile(directory / "activations.bin")
    bundle.mask_features.astype("<f4").tofile(directory / "mask_features.bin")
    bundle.behavioral.astype("<f4").tofile(directory / "behavioral.bin")


def heatmap_bytes(
    heatmap: Heatmap,
    fmt: str,
    size: tuple[int, int] | None = None,
    upsample_mode: str = "bilinear",
) -> bytes:
    """Encode a heatmap as 8-bit binary PGM (min-max scaled) or CSV (raw values).

    ``size`` upsamples the grid first.
    """
    fmt = fmt.lower()
    grid = heatmap.grid
    if not np.all(np.isfinite(grid)):
        raise ValueError("heatmap contains non-finite values")
    if size is not None:
        grid = bilinear_upsample(grid, size[0], size[1], mode=upsample_mode)
    if fmt == "pgm":
        pixels = np.rint(Heatmap(grid).normalized() * 255.0).astype(np.uint8)
        h, w = pixels.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()
    if fmt == "csv":
        lines = [",".join(repr(float(v)) for v in row) for row in grid]
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown heatmap format {fmt!r}")


def export_heatmap(
    heatmap: Heatmap,
    path: str | Path,
    fmt: str | None = None,
    size: tuple[int, int] | None = None,
    upsample_mode: str = "bilinear",
) -> Path:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    path.write_bytes(heatmap_bytes(heatmap, fmt, size, upsample_mode))
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    # exactly one whitespace byte separates the header from the pixels
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def read_heatmap_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
