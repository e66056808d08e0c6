"""Feature-space adapters: the behavior-gated BeFA adapter plus LoRA and
soft-prompt baselines.

Every adapter maps a batch of content features ``e`` (``(n, d_m)``) and the
matching item behavioral embeddings ``h`` (``(n, d)``) to adapted features of
shape ``(n, d_m)``. 1-d inputs are treated as a batch of one and returned as
1-d. Parameters live in a plain ``dict[str, ndarray]`` so the optimizer and
the checkpoint writer can treat all adapters alike.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .numkit import linear, sigmoid, xavier_init


class AdapterKind(str, enum.Enum):
    NONE = "none"
    BEFA = "befa"
    LORA = "lora"
    PROMPT = "prompt"


@dataclass
class Tape:
    """Intermediates saved by a forward pass for the matching backward pass."""

    kind: str
    squeeze: bool
    values: dict[str, Any] = field(default_factory=dict)


def _batch(x, width: int, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{name}: expected width {width}, got shape {x.shape}")
    return x, squeeze


def _unbatch(x: np.ndarray, squeeze: bool) -> np.ndarray:
    return x[0] if squeeze else x


def _dropout_mask(shape, p: float, rng: np.random.Generator | None) -> np.ndarray | None:
    if rng is None or p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


class Adapter:
    """Base class. Subclasses fill ``params`` and implement forward/backward."""

    kind: AdapterKind = AdapterKind.NONE

    def __init__(self, d: int, d_m: int):
        self.d = d
        self.d_m = d_m
        self.params: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {"kind": self.kind.value, "d": self.d, "d_m": self.d_m}

    def forward(self, e, h, rng: np.random.Generator | None = None, exact: bool = False):
        """Return ``(adapted, tape)``. ``rng=None`` is eval mode (no dropout).

        ``exact`` selects batch-invariant products (see :func:`numkit.linear`).
        """
        e, squeeze = _batch(e, self.d_m, "features")
        h, _ = _batch(h, self.d, "behavior")
        if len(e) != len(h):
            raise ValueError(f"batch mismatch: {len(e)} feature rows vs {len(h)} behavior rows")
        return _unbatch(e.copy(), squeeze), Tape(self.kind.value, squeeze)

    def backward(self, tape: Tape, d_out):
        """Return ``(param_grads, d_e, d_h)`` for upstream sensitivity ``d_out``."""
        self._check_tape(tape)
        d_out, squeeze = _batch(d_out, self.d_m, "d_out")
        d_h = np.zeros((len(d_out), self.d))
        return {}, _unbatch(d_out.copy(), squeeze), _unbatch(d_h, squeeze)

    def _check_tape(self, tape: Tape):
        if tape.kind != self.kind.value:
            raise ValueError(f"tape from a {tape.kind!r} forward given to a {self.kind.value!r} adapter")

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


class IdentityAdapter(Adapter):
    kind = AdapterKind.NONE


class BefaAdapter(Adapter):
    """Behavior-driven feature adapter.

    decouple:  ė = dropout(relu(W1 e + b1))
    filter:    ë = dropout((P_gate h) ⊙ tanh(W2 ė + b2))
    merge:     ē = (P_merge h) ⊙ σ(W3 ë + b3)

    ``identity_gate`` / ``identity_merge`` replace the behavioral projections
    by the identity (requires ``d == d_a`` / ``d == d_m``). ``projection_bias``
    makes the two projections affine (``P h + c``). ``relu_after_gate`` adds a
    ReLU on the filter output before its dropout.
    """

    kind = AdapterKind.BEFA

    def __init__(
        self,
        d: int,
        d_m: int,
        d_a: int,
        rng: np.random.Generator,
        dropout: float = 0.1,
        identity_gate: bool = False,
        identity_merge: bool = False,
        relu_after_gate: bool = False,
        projection_bias: bool = False,
    ):
        super().__init__(d, d_m)
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if identity_gate and d != d_a:
            raise ValueError("identity gate projection needs d == d_a")
        if identity_merge and d != d_m:
            raise ValueError("identity merge projection needs d == d_m")
        self.d_a = d_a
        self.dropout = dropout
        self.identity_gate = identity_gate
        self.identity_merge = identity_merge
        self.relu_after_gate = relu_after_gate
        self.projection_bias = projection_bias
        self.params = {
            "W1": xavier_init(d_a, d_m, rng),
            "b1": np.zeros(d_a),
            "W2": xavier_init(d_a, d_a, rng),
            "b2": np.zeros(d_a),
            "W3": xavier_init(d_m, d_a, rng),
            "b3": np.zeros(d_m),
        }
        if not identity_gate:
            self.params["P_gate"] = xavier_init(d_a, d, rng)
        if not identity_merge:
            self.params["P_merge"] = xavier_init(d_m, d, rng)
        if projection_bias:
            self.params["c_gate"] = np.zeros(d_a)
            self.params["c_merge"] = np.zeros(d_m)

    def config(self) -> dict:
        return {
            **super().config(),
            "d_a": self.d_a,
            "dropout": self.dropout,
            "identity_gate": self.identity_gate,
            "identity_merge": self.identity_merge,
            "relu_after_gate": self.relu_after_gate,
            "projection_bias": self.projection_bias,
        }

    def gate_vectors(self, h: np.ndarray, exact: bool = False) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        g = h if self.identity_gate else linear(h, p["P_gate"], exact)
        m = h if self.identity_merge else linear(h, p["P_merge"], exact)
        if self.projection_bias:
            g = g + p["c_gate"]
            m = m + p["c_merge"]
        return g, m

    def forward(self, e, h, rng=None, exact=False):
        e, squeeze = _batch(e, self.d_m, "features")
        h, _ = _batch(h, self.d, "behavior")
        if len(e) != len(h):
            raise ValueError(f"batch mismatch: {len(e)} feature rows vs {len(h)} behavior rows")
        p = self.params
        n = len(e)

        z1 = linear(e, p["W1"], exact) + p["b1"]
        a1 = np.maximum(z1, 0.0)
        m1 = _dropout_mask((n, self.d_a), self.dropout, rng)
        e_dot = a1 if m1 is None else a1 * m1

        gate, merge = self.gate_vectors(h, exact)
        t = np.tanh(linear(e_dot, p["W2"], exact) + p["b2"])
        pre = gate * t
        if self.relu_after_gate:
            pre_act = np.maximum(pre, 0.0)
        else:
            pre_act = pre
        m2 = _dropout_mask((n, self.d_a), self.dropout, rng)
        e_ddot = pre_act if m2 is None else pre_act * m2

        s = sigmoid(linear(e_ddot, p["W3"], exact) + p["b3"])
        out = merge * s

        tape = Tape(
            self.kind.value,
            squeeze,
            dict(e=e, h=h, z1=z1, m1=m1, e_dot=e_dot, gate=gate, t=t, pre=pre, m2=m2, e_ddot=e_ddot, merge=merge, s=s),
        )
        return _unbatch(out, squeeze), tape

    def backward(self, tape, d_out):
        self._check_tape(tape)
        d_out, squeeze = _batch(d_out, self.d_m, "d_out")
        v = tape.values
        if d_out.shape[0] != v["e"].shape[0]:
            raise ValueError("d_out batch does not match the tape")
        p = self.params
        grads: dict[str, np.ndarray] = {}

        d_merge = d_out * v["s"]
        d_z3 = d_out * v["merge"] * v["s"] * (1.0 - v["s"])
        grads["W3"] = d_z3.T @ v["e_ddot"]
        grads["b3"] = d_z3.sum(axis=0)
        d_pre = d_z3 @ p["W3"]
        if v["m2"] is not None:
            d_pre = d_pre * v["m2"]
        if self.relu_after_gate:
            d_pre = d_pre * (v["pre"] > 0)

        d_gate = d_pre * v["t"]
        d_z2 = d_pre * v["gate"] * (1.0 - v["t"] ** 2)
        grads["W2"] = d_z2.T @ v["e_dot"]
        grads["b2"] = d_z2.sum(axis=0)
        d_a1 = d_z2 @ p["W2"]
        if v["m1"] is not None:
            d_a1 = d_a1 * v["m1"]

        d_z1 = d_a1 * (v["z1"] > 0)
        grads["W1"] = d_z1.T @ v["e"]
        grads["b1"] = d_z1.sum(axis=0)
        d_e = d_z1 @ p["W1"]

        h = v["h"]
        if self.projection_bias:
            grads["c_gate"] = d_gate.sum(axis=0)
            grads["c_merge"] = d_merge.sum(axis=0)
        if self.identity_gate:
            d_h = d_gate.copy()
        else:
            grads["P_gate"] = d_gate.T @ h
            d_h = d_gate @ p["P_gate"]
        if self.identity_merge:
            d_h = d_h + d_merge
        else:
            grads["P_merge"] = d_merge.T @ h
            d_h = d_h + d_merge @ p["P_merge"]
        return grads, _unbatch(d_e, squeeze), _unbatch(d_h, squeeze)


class LoraAdapter(Adapter):
    """Low-rank residual: ``e + (alpha / r) * B (A e)``. B starts at zero."""

    kind = AdapterKind.LORA

    def __init__(self, d: int, d_m: int, rank: int, rng: np.random.Generator, alpha: float | None = None):
        super().__init__(d, d_m)
        if not 1 <= rank <= d_m:
            raise ValueError("rank must lie in [1, d_m]")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.params = {"A": xavier_init(rank, d_m, rng), "B": np.zeros((d_m, rank))}

    def config(self) -> dict:
        return {**super().config(), "rank": self.rank, "alpha": self.alpha}

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, e, h=None, rng=None, exact=False):
        e, squeeze = _batch(e, self.d_m, "features")
        z = linear(e, self.params["A"], exact)
        out = e + self.scale * linear(z, self.params["B"], exact)
        return _unbatch(out, squeeze), Tape(self.kind.value, squeeze, {"e": e, "z": z})

    def backward(self, tape, d_out):
        self._check_tape(tape)
        d_out, squeeze = _batch(d_out, self.d_m, "d_out")
        v = tape.values
        c = self.scale
        grads = {"B": c * d_out.T @ v["z"]}
        d_z = c * d_out @ self.params["B"]
        grads["A"] = d_z.T @ v["e"]
        d_e = d_out + d_z @ self.params["A"]
        d_h = np.zeros((len(d_out), self.d))
        return grads, _unbatch(d_e, squeeze), _unbatch(d_h, squeeze)


class PromptAdapter(Adapter):
    """Additive learnable prompt ``e + prompt``, zero initialized."""

    kind = AdapterKind.PROMPT

    def __init__(self, d: int, d_m: int):
        super().__init__(d, d_m)
        self.params = {"prompt": np.zeros(d_m)}

    def forward(self, e, h=None, rng=None, exact=False):
        e, squeeze = _batch(e, self.d_m, "features")
        return _unbatch(e + self.params["prompt"], squeeze), Tape(self.kind.value, squeeze)

    def backward(self, tape, d_out):
        self._check_tape(tape)
        d_out, squeeze = _batch(d_out, self.d_m, "d_out")
        d_h = np.zeros((len(d_out), self.d))
        return {"prompt": d_out.sum(axis=0)}, _unbatch(d_out.copy(), squeeze), _unbatch(d_h, squeeze)


def build_adapter(
    kind: AdapterKind | str,
    d: int,
    d_m: int,
    rng: np.random.Generator,
    *,
    d_a: int | None = None,
    dropout: float = 0.1,
    lora_rank: int = 4,
    identity_gate: bool = False,
    identity_merge: bool = False,
    relu_after_gate: bool = False,
    projection_bias: bool = False,
) -> Adapter:
    kind = AdapterKind(kind)
    if kind is AdapterKind.NONE:
        return IdentityAdapter(d, d_m)
    if kind is AdapterKind.BEFA:
        return BefaAdapter(
            d,
            d_m,
            d_a if d_a is not None else 4 * d,
            rng,
            dropout=dropout,
            identity_gate=identity_gate,
            identity_merge=identity_merge,
            relu_after_gate=relu_after_gate,
            projection_bias=projection_bias,
        )
    if kind is AdapterKind.LORA:
        return LoraAdapter(d, d_m, lora_rank, rng)
    return PromptAdapter(d, d_m)


def adapter_from_config(cfg: dict, params: dict[str, np.ndarray]) -> Adapter:
    """Rebuild an adapter from :meth:`Adapter.config` output and its tensors."""
    kind = AdapterKind(cfg["kind"])
    rng = np.random.Generator(np.random.PCG64(0))
    adapter = build_adapter(
        kind,
        cfg["d"],
        cfg["d_m"],
        rng,
        d_a=cfg.get("d_a"),
        dropout=cfg.get("dropout", 0.1),
        lora_rank=cfg.get("rank", 4),
        identity_gate=cfg.get("identity_gate", False),
        identity_merge=cfg.get("identity_merge", False),
        relu_after_gate=cfg.get("relu_after_gate", False),
        projection_bias=cfg.get("projection_bias", False),
    )
    if isinstance(adapter, LoraAdapter):
        adapter.alpha = cfg.get("alpha", adapter.alpha)
    if set(params) != set(adapter.params):
        raise ValueError(f"adapter tensors {sorted(params)} do not match {sorted(adapter.params)}")
    for name, value in params.items():
        if value.shape != adapter.params[name].shape:
            raise ValueError(f"adapter tensor {name}: shape {value.shape} != {adapter.params[name].shape}")
        adapter.params[name] = value
    return adapter


# functional aliases ---------------------------------------------------------


def befa_forward(e, h_item, adapter: BefaAdapter, rng: np.random.Generator | None = None):
    return adapter.forward(e, h_item, rng)


def befa_backward(tape: Tape, d_out, adapter: BefaAdapter):
    return adapter.backward(tape, d_out)


def lora_forward(e, adapter: LoraAdapter) -> np.ndarray:
    return adapter.forward(e)[0]


def prompt_forward(e, adapter: PromptAdapter) -> np.ndarray:
    return adapter.forward(e)[0]


def param_count(
    kind: AdapterKind | str,
    d: int,
    d_m: int,
    d_a: int | None = None,
    *,
    lora_rank: int = 4,
    identity_gate: bool = False,
    identity_merge: bool = False,
    projection_bias: bool = False,
) -> int:
    """Trainable scalars added by one adapter on one modality."""
    kind = AdapterKind(kind)
    if kind is AdapterKind.NONE:
        return 0
    if kind is AdapterKind.PROMPT:
        return d_m
    if kind is AdapterKind.LORA:
        return 2 * lora_rank * d_m
    d_a = 4 * d if d_a is None else d_a
    n = d_a * d_m + d_a + d_a * d_a + d_a + d_m * d_a + d_m
    if not identity_gate:
        n += d_a * d
    if not identity_merge:
        n += d_m * d
    if projection_bias:
        n += d_a + d_m
    return n
