"""Dense behavior-cloning policy: init, forward, analytic backprop, optimizer.

Parameters live in a single flat float64 vector (per-layer weight then bias,
row-major) so they can be averaged, diffed, and shipped over the wire without
any structure-aware code on the server side.  All operations are pure
functions over explicit state.

Numerics note: ``forward`` pushes every row through the same single-row
kernel, so evaluating a batch and evaluating its rows one by one are bitwise
identical.  ``backward`` uses batched GEMM for speed; its correctness contract
is the finite-difference check (``grad_check``), not bit-equality with
``forward``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import rng_from

DEFAULT_HIDDEN = (256, 128, 512)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the policy MLP: rectifier hidden stack, tanh head."""

    input_dim: int
    hidden_widths: tuple[int, ...] = DEFAULT_HIDDEN
    output_dim: int = 4
    hidden_activation: str = "relu"
    output_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.hidden_activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation != "tanh":
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = self.layer_dims
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def param_count(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_shapes)

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of (weight, bias) per layer into the flat vector. No copy."""
        params = check_params(self, params)
        out = []
        off = 0
        for fan_in, fan_out in self.layer_shapes:
            w = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = params[off : off + fan_out]
            off += fan_out
            out.append((w, b))
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(int(w) for w in d["hidden_widths"]),
            output_dim=int(d["output_dim"]),
            hidden_activation=d.get("hidden_activation", "relu"),
            output_activation=d.get("output_activation", "tanh"),
        )

    def fingerprint(self) -> bytes:
        """32-byte digest identifying the architecture (used by checkpoints)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.param_count:
        raise ValueError(
            f"parameter vector has length {params.shape}, spec needs {spec.param_count}"
        )
    return params


@dataclass
class Batch:
    """Expert (observation, action) pairs used as a supervised batch."""

    observations: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.observations.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("observations and targets must be 2-D")
        if self.observations.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"row mismatch: {self.observations.shape[0]} obs vs "
                f"{self.targets.shape[0]} targets"
            )
        if self.observations.shape[0] < 1:
            raise ValueError("batch must contain at least one row")
        if self.targets.size and (
            self.targets.min() < -1.0 or self.targets.max() > 1.0
        ):
            raise ValueError("targets must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.observations.shape[0]


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform fan-in-scaled weights in (-sqrt(6/fan_in), +...), zero biases."""
    rng = rng_from(seed)
    params = np.empty(spec.param_count, dtype=np.float64)
    off = 0
    for fan_in, fan_out in spec.layer_shapes:
        a = np.sqrt(6.0 / fan_in)
        n_w = fan_in * fan_out
        params[off : off + n_w] = rng.uniform(-a, a, size=n_w)
        off += n_w
        params[off : off + fan_out] = 0.0
        off += fan_out
    return params


def _forward_row(layers, obs: np.ndarray) -> np.ndarray:
    h = obs
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.tanh(z) if i == last else np.maximum(z, 0.0)
    return h


def forward(spec: ModelSpec, params: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Evaluate the policy on one observation (1-D) or a stack of them (2-D).

    Outputs are tanh-bounded to [-1, 1] componentwise.
    """
    layers = spec.unpack(params)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        if obs.shape[0] != spec.input_dim:
            raise ValueError(f"obs length {obs.shape[0]} != input_dim {spec.input_dim}")
        return _forward_row(layers, obs)
    if obs.ndim == 2:
        if obs.shape[1] != spec.input_dim:
            raise ValueError(f"obs width {obs.shape[1]} != input_dim {spec.input_dim}")
        out = np.empty((obs.shape[0], spec.output_dim), dtype=np.float64)
        for i in range(obs.shape[0]):
            out[i] = _forward_row(layers, obs[i])
        return out
    raise ValueError("obs must be 1-D or 2-D")


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over every entry (batch rows and action dims)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(d * d))


def backward(
    spec: ModelSpec, params: np.ndarray, batch: Batch
) -> tuple[float, np.ndarray]:
    """Loss and exact gradient of mse_loss(forward(obs), targets) wrt params."""
    layers = spec.unpack(params)
    x = batch.observations
    t = batch.targets
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"obs width {x.shape[1]} != input_dim {spec.input_dim}")
    if t.shape[1] != spec.output_dim:
        raise ValueError(f"target width {t.shape[1]} != output_dim {spec.output_dim}")

    last = len(layers) - 1
    acts = [x]  # post-activation outputs, acts[i] feeds layer i
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        acts.append(np.tanh(z) if i == last else np.maximum(z, 0.0))

    y = acts[-1]
    diff = y - t
    loss = float(np.mean(diff * diff))

    grad = np.zeros_like(params)
    gviews = spec.unpack(grad)

    # d loss / d y, then through the tanh head
    g = (2.0 / diff.size) * diff
    g = g * (1.0 - y * y)
    for i in range(last, -1, -1):
        w, _ = layers[i]
        gw, gb = gviews[i]
        gw[...] = acts[i].T @ g
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = (g @ w.T) * (acts[i] > 0.0)
    return loss, grad


@dataclass
class AdamState:
    """Adaptive-moment optimizer state (bias-corrected update)."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr: float = 1e-4

    @classmethod
    def fresh(cls, n_params: int, lr: float = 1e-4) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr)


def adam_step(
    params: np.ndarray, grad: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("params, grad, and optimizer state lengths disagree")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, m=m, v=v, t=t)


# Below this magnitude a gradient coordinate is compared by absolute
# difference: central differences carry ~|loss|*eps/(2h) of cancellation
# noise, which would swamp a ratio against a near-zero denominator.
_GRAD_CHECK_FLOOR = 1e-4


def grad_check(
    spec: ModelSpec, params: np.ndarray, batch: Batch, h: float = 1e-6
) -> float:
    """Max relative error of the analytic gradient vs central differences.

    Near-zero coordinates fall back to the absolute difference, so a
    zero-gradient batch reports ~0 rather than 0/0.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = check_params(spec, params).copy()
    _, grad = backward(spec, params, batch)

    def loss_at(p):
        return mse_loss(forward(spec, p, batch.observations), batch.targets)

    worst = 0.0
    for i in range(params.shape[0]):
        orig = params[i]
        params[i] = orig + h
        lp = loss_at(params)
        params[i] = orig - h
        lm = loss_at(params)
        params[i] = orig
        num = (lp - lm) / (2.0 * h)
        diff = abs(grad[i] - num)
        denom = max(abs(grad[i]), abs(num))
        err = diff / denom if denom > _GRAD_CHECK_FLOOR else diff
        worst = max(worst, err)
    return worst
