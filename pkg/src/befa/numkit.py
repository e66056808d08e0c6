"""Dense numeric kernels shared by the rest of the package.

Matrices and vectors are plain float64 numpy arrays. Random streams are
``numpy.random.Generator`` instances built by :func:`make_rng`.
"""
from __future__ import annotations

from typing import Literal

import numpy as np

Nonlinearity = Literal["tanh", "sigmoid", "relu"]


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 stream; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def matvec(m, v) -> np.ndarray:
    m, v = as_matrix(m), as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {m.shape} vs vector ({v.shape[0]},)")
    return m @ v


def linear(x: np.ndarray, w: np.ndarray, exact: bool = False) -> np.ndarray:
    """Row-batched ``x @ w.T``.

    With ``exact=True`` each output row is bitwise independent of how many
    rows are in the batch (BLAS kernels pick different reduction orders for
    different batch shapes).
    """
    if exact:
        return np.einsum("nk,mk->nm", x, w)
    return x @ w.T


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp(-|x|) never overflows; pick 1/(1+z) or z/(1+z) by sign
    z = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + z)
    return np.where(x >= 0, r, z * r)


def log_sigmoid(x):
    """ln σ(x), stable for any finite x."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def apply_nonlinearity(v, kind: Nonlinearity) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if kind == "tanh":
        return np.tanh(v)
    if kind == "sigmoid":
        return sigmoid(v)
    if kind == "relu":
        return np.maximum(v, 0.0)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def hadamard(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a * b


def xavier_bound(rows: int, cols: int) -> float:
    return float(np.sqrt(6.0 / (rows + cols)))


def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform Xavier/Glorot draw in [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]."""
    if rows < 1 or cols < 1:
        raise ValueError("xavier_init needs rows, cols >= 1")
    a = xavier_bound(rows, cols)
    return rng.uniform(-a, a, size=(rows, cols))


def _axis_coords(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if src == 1 or dst == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.floor(pos).astype(np.int64)
    lo = np.clip(lo, 0, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_upsample(grid, out_h: int, out_w: int, *, mode: str = "bilinear") -> np.ndarray:
    """Resize ``grid`` to ``(out_h, out_w)``.

    Coordinates are corner aligned: ``src = dst * (src_dim - 1) / (dst_dim - 1)``.
    A single source row or column is replicated. ``mode="nearest"`` rounds the
    same source coordinate instead of interpolating, which keeps binary masks
    binary.
    """
    g = as_matrix(grid)
    if g.size == 0:
        raise ValueError("cannot upsample an empty grid")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    if out_h < g.shape[0] or out_w < g.shape[1]:
        raise ValueError(f"output {out_h}x{out_w} smaller than input {g.shape[0]}x{g.shape[1]}")
    if (out_h, out_w) == g.shape:
        return g.copy()

    r0, r1, fr = _axis_coords(g.shape[0], out_h)
    c0, c1, fc = _axis_coords(g.shape[1], out_w)
    if mode == "nearest":
        rows = np.where(fr >= 0.5, r1, r0)
        cols = np.where(fc >= 0.5, c1, c0)
        return g[np.ix_(rows, cols)]
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")

    fr = fr[:, None]
    fc = fc[None, :]
    top = g[np.ix_(r0, c0)] * (1 - fc) + g[np.ix_(r0, c1)] * fc
    bot = g[np.ix_(r1, c0)] * (1 - fc) + g[np.ix_(r1, c1)] * fc
    out = top * (1 - fr) + bot * fr
    # convex combination can drift by an ulp outside the source envelope
    return np.clip(out, g.min(), g.max())
