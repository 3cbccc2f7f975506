"""Small fully-connected networks with hand-written backprop and Adam.

Everything is float64 and works on single vectors or row-batches. Nothing here
knows about reinforcement learning; the policy and value heads are built on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Input or gradient dimensions disagree with the network."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class MlpParams:
    """Weights ``W[i]`` of shape (fan_in, fan_out) and biases ``b[i]`` of shape (fan_out,).

    Hidden layers use tanh; the last layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[0]} inputs, previous layer gives "
                    f"{self.weights[i - 1].shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray], activation: str = "tanh") -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.activation,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# Gradients have exactly the layout of the parameters they belong to.
GradientSet = MlpParams


def init_mlp(
    sizes: list[int],
    rng: np.random.Generator,
    hidden_gain: float = 1.0,
    output_gain: float = 1.0,
) -> MlpParams:
    """Orthogonal init, zero biases.

    ``sizes`` lists widths from input to output, e.g. ``[3, 64, 64, 1]``.
    """
    if len(sizes) < 2 or min(sizes) < 1:
        raise ShapeError(f"bad layer sizes {sizes}")
    weights, biases = [], []
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = output_gain if i == n_layers - 1 else hidden_gain
        a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        w = q if fan_in >= fan_out else q.T
        weights.append(gain * w[:fan_in, :fan_out].copy())
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (params.in_dim,):
        raise ShapeError(f"input width {x.shape[-1:]} but network expects {params.in_dim}")
    return x


def _forward_cache(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    # activations[i] is the input to layer i; the final entry is the output
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a vector (in,) or a batch (..., in)."""
    x = _check_input(params, x)
    return _forward_cache(params, x)[-1]


def mlp_backward(params: MlpParams, x: np.ndarray, output_grad: np.ndarray) -> GradientSet:
    """Gradient of ``sum(output_grad * mlp_forward(params, x))`` w.r.t. every parameter.

    Batched inputs are summed over the batch.
    """
    x = _check_input(params, x)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != x.shape[:-1] + (params.out_dim,):
        raise ShapeError(f"output_grad shape {g.shape} does not match output {x.shape[:-1] + (params.out_dim,)}")
    x2 = x.reshape(-1, params.in_dim)
    g = g.reshape(-1, params.out_dim)
    acts = _forward_cache(params, x2)
    n = len(params.weights)
    dw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            # acts[i + 1] = tanh(pre-activation)
            g = g * (1.0 - acts[i + 1] ** 2)
        dw[i] = acts[i].T @ g
        db[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i].T
    return MlpParams(dw, db, params.activation)


def mlp_input_grad(params: MlpParams, x: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product with respect to the input, same shape as ``x``."""
    x = _check_input(params, x)
    shape = x.shape
    x2 = x.reshape(-1, params.in_dim)
    g = np.asarray(output_grad, dtype=np.float64).reshape(-1, params.out_dim)
    acts = _forward_cache(params, x2)
    n = len(params.weights)
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        g = g @ params.weights[i].T
    return g.reshape(shape)


def global_norm(grads: GradientSet) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays())))


def clip_by_global_norm(grads: GradientSet, max_norm: float) -> GradientSet:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return MlpParams([w * scale for w in grads.weights], [b * scale for b in grads.biases], grads.activation)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays: list[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr=lr, **kw)

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-3, **kw) -> "AdamState":
        return cls.for_arrays(params.arrays(), lr=lr, **kw)


# name kept for readers looking for the optimizer type
OptimizerState = AdamState


def adam_update(
    opt: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> tuple[AdamState, list[np.ndarray]]:
    """Bias-corrected Adam descent step on flat array lists. Returns new state and params."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ShapeError("optimizer, params and grads hold different numbers of arrays")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != opt.m[i].shape:
            raise ShapeError(f"array {i}: param {p.shape}, grad {g.shape}, moment {opt.m[i].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"array {i} has {bad} non-finite gradient entries")
    t = opt.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        new_p.append(p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps))
        new_m.append(m)
        new_v.append(v)
    state = AdamState(new_m, new_v, t, opt.lr, opt.beta1, opt.beta2, opt.eps)
    return state, new_p


def adam_step(opt: AdamState, params: MlpParams, grads: GradientSet) -> tuple[AdamState, MlpParams]:
    state, arrays = adam_update(opt, params.arrays(), grads.arrays())
    return state, MlpParams.from_arrays(arrays, params.activation)
