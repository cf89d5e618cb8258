"""Dense feed-forward regressors with explicit backprop and Adam updates.

Everything runs in double precision on plain numpy arrays.  Parameters are a
list of (fan_in, fan_out) weight matrices plus bias vectors; the output layer
is linear and one unit wide.  Checkpoints serialize to JSON with full float
precision, so a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import ScalerParams

__all__ = [
    "MlpSpec",
    "RegressorParams",
    "Gradients",
    "AdamState",
    "Checkpoint",
    "init_params",
    "forward_batch",
    "backward",
    "adam_step",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]

_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[d, h_1, ..., h_k, 1]`` and the hidden activation."""

    layer_sizes: tuple
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError("all layer sizes must be at least 1")
        if sizes[-1] != 1:
            raise ValueError("output layer must have exactly one unit")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]


@dataclass
class RegressorParams:
    spec: MlpSpec
    weights: list
    biases: list

    def copy(self) -> "RegressorParams":
        return RegressorParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def blocks(self):
        """Yield (name, array) pairs over every parameter block."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layer {i} weights", w
            yield f"layer {i} biases", b


@dataclass
class Gradients:
    weights: list
    biases: list

    def blocks(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layer {i} weights", w
            yield f"layer {i} biases", b


def init_params(spec: MlpSpec, seed: int = 0) -> RegressorParams:
    """Seeded uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return RegressorParams(spec, weights, biases)


def _forward_cached(params: RegressorParams, X: np.ndarray):
    """Forward pass keeping post-activation values per layer for backprop."""
    acts = [X]
    a = X
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        if i < last:
            a = np.tanh(z) if params.spec.activation == "tanh" else np.maximum(z, 0.0)
        else:
            a = z
        acts.append(a)
    return acts


def forward_batch(params: RegressorParams, X) -> np.ndarray:
    """Predictions for every row of ``X``, shape (n,)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ValueError(f"expected shape (n, {params.spec.input_dim}), got {X.shape}")
    return _forward_cached(params, X)[-1][:, 0]


def backward(params: RegressorParams, X, upstream) -> Gradients:
    """Exact gradient of sum_i upstream_i * f(x_i) over all parameters."""
    X = np.asarray(X, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ValueError(f"expected shape (n, {params.spec.input_dim}), got {X.shape}")
    if upstream.shape != (X.shape[0],):
        raise ValueError("upstream must be a vector with one entry per row")
    acts = _forward_cached(params, X)
    d_w = [None] * len(params.weights)
    d_b = [None] * len(params.biases)
    delta = upstream[:, None]
    for i in range(len(params.weights) - 1, -1, -1):
        d_w[i] = acts[i].T @ delta
        d_b[i] = delta.sum(axis=0)
        if i > 0:
            da = delta @ params.weights[i].T
            hidden = acts[i]
            if params.spec.activation == "tanh":
                delta = da * (1.0 - hidden**2)
            else:
                delta = da * (hidden > 0.0)
    return Gradients(d_w, d_b)


@dataclass
class AdamState:
    """Moment accumulators mirroring the parameter blocks, plus step counter."""

    m_w: list
    v_w: list
    m_b: list
    v_b: list
    t: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, params: RegressorParams, learning_rate: float = 1e-4, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in params.weights],
            v_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_b=[np.zeros_like(b) for b in params.biases],
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: RegressorParams, grads: Gradients, state: AdamState):
    """One adaptive-moment update; returns fresh (params, state) without mutating inputs."""
    for name, g in grads.blocks():
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient in {name}")
    t = state.t + 1
    b1, b2, lr, eps = state.beta1, state.beta2, state.learning_rate, state.epsilon
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t

    def update(theta, g, m, v):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g**2
        step = lr * (m_new / corr1) / (np.sqrt(v_new / corr2) + eps)
        return theta - step, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for theta, g, m, v in zip(params.weights, grads.weights, state.m_w, state.v_w):
        th, mn, vn = update(theta, g, m, v)
        new_w.append(th)
        new_mw.append(mn)
        new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for theta, g, m, v in zip(params.biases, grads.biases, state.m_b, state.v_b):
        th, mn, vn = update(theta, g, m, v)
        new_b.append(th)
        new_mb.append(mn)
        new_vb.append(vn)
    new_params = RegressorParams(params.spec, new_w, new_b)
    new_state = AdamState(new_mw, new_vw, new_mb, new_vb, t, lr, b1, b2, eps)
    return new_params, new_state


def grad_check(loss_fn, params: RegressorParams, h: float = 1e-5) -> float:
    """Compare an analytic gradient against central differences, coordinate by coordinate.

    ``loss_fn`` maps parameters to (scalar loss, Gradients).  Returns
    max over coordinates of |g_analytic - g_fd| / max(1, |g_fd|).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    _, analytic = loss_fn(params)
    worst = 0.0
    analytic_blocks = {name: g for name, g in analytic.blocks()}
    for name, _ in params.blocks():
        g_block = analytic_blocks[name]
        it = np.nditer(g_block, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            plus = params.copy()
            minus = params.copy()
            _named_block(plus, name)[idx] += h
            _named_block(minus, name)[idx] -= h
            lp, _ = loss_fn(plus)
            lm, _ = loss_fn(minus)
            fd = (lp - lm) / (2.0 * h)
            err = abs(g_block[idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
            it.iternext()
    return worst


def _named_block(params: RegressorParams, name: str) -> np.ndarray:
    kind, i, which = name.split(" ")[0], int(name.split(" ")[1]), name.split(" ")[2]
    del kind
    return params.weights[i] if which == "weights" else params.biases[i]


@dataclass(frozen=True)
class Checkpoint:
    params: RegressorParams
    scaler: ScalerParams | None = None


def save_checkpoint(path, params: RegressorParams, scaler: ScalerParams | None = None) -> None:
    payload = {
        "version": _CHECKPOINT_VERSION,
        "spec": {"layers": list(params.spec.layer_sizes), "activation": params.spec.activation},
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "scaler": scaler.to_dict() if scaler is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("version")
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    spec = MlpSpec(tuple(payload["spec"]["layers"]), payload["spec"]["activation"])
    weights = [np.array(w, dtype=np.float64) for w in payload["weights"]]
    biases = [np.array(b, dtype=np.float64) for b in payload["biases"]]
    expected = list(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]))
    if len(weights) != len(expected) or len(biases) != len(expected):
        raise ValueError("checkpoint layer count does not match its spec")
    for (fan_in, fan_out), w, b in zip(expected, weights, biases):
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError(
                f"checkpoint shape mismatch: expected {(fan_in, fan_out)}, got {w.shape} / {b.shape}"
            )
    scaler = ScalerParams.from_dict(payload["scaler"]) if payload.get("scaler") else None
    return Checkpoint(RegressorParams(spec, weights, biases), scaler)
