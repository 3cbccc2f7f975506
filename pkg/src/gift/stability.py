"""Maximal Lyapunov exponents of closed-loop maps, plus perturbation fans.

Exponents are per discrete step (natural log). Divide by ``dt`` for a per-second rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from gift import env as envlib
from gift.policy import PolicyParams, act_deterministic

# divergence norms recorded once a perturbed trajectory stops being finite
SATURATION = 1e12


class NonFiniteProbeError(FloatingPointError):
    pass


class TrajectoryDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ClosedLoopMap:
    """A pure state-to-state map, batched over leading dimensions."""

    fn: Callable[[np.ndarray], np.ndarray]
    dim: int
    name: str = "map"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(x)

    @classmethod
    def from_policy(cls, spec: envlib.EnvSpec, policy: PolicyParams) -> "ClosedLoopMap":
        def step(x: np.ndarray) -> np.ndarray:
            u = act_deterministic(policy, envlib.observe(spec, x))
            return envlib.rk4(spec, x, u)

        return cls(step, spec.state_dim, f"{spec.env_id}-closed-loop")

    @classmethod
    def linear(cls, A) -> "ClosedLoopMap":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        return cls(lambda x: x @ A.T, A.shape[0], "linear")


def logistic_map(r: float = 4.0) -> ClosedLoopMap:
    return ClosedLoopMap(lambda x: r * x * (1.0 - x), 1, f"logistic-{r}")


def henon_map(a: float = 1.4, b: float = 0.3) -> ClosedLoopMap:
    def step(s: np.ndarray) -> np.ndarray:
        x, y = s[..., 0], s[..., 1]
        return np.stack([1.0 - a * x * x + y, b * x], axis=-1)

    return ClosedLoopMap(step, 2, f"henon-{a}-{b}")


@dataclass
class MleEstimate:
    lam: float
    steps: int
    transient: int
    method: str
    initial_state: np.ndarray
    epsilon: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class PerturbationFan:
    base: np.ndarray  # (H + 1, n)
    perturbed: np.ndarray  # (P, H + 1, n)
    delta0: float
    divergence: np.ndarray  # (P, H + 1)

    @property
    def max_divergence(self) -> np.ndarray:
        return self.divergence.max(axis=0)

    def growth(self) -> float:
        """Final max divergence relative to the initial perturbation size."""
        return float(self.max_divergence[-1] / self.delta0) if self.delta0 > 0 else 0.0


def _probe_offsets(n: int, eps: float) -> np.ndarray:
    # row 0 is the unperturbed point, then +eps e_i for each i, then -eps e_i
    return np.concatenate([np.zeros((1, n)), np.eye(n) * eps, -np.eye(n) * eps])


def _jacobians(F: ClosedLoopMap, x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians (B, n, n) and F(x) (B, n) from a single batched call."""
    B, n = x.shape
    pts = x[:, None, :] + _probe_offsets(n, eps)
    with np.errstate(all="ignore"):
        out = F(pts.reshape(-1, n)).reshape(B, 2 * n + 1, n)
    # rows of the difference are Jacobian columns
    cols = (out[:, 1 : n + 1] - out[:, n + 1 :]) / (2.0 * eps)
    return np.swapaxes(cols, 1, 2), out[:, 0]


def jacobian_fd(F: ClosedLoopMap, s: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference Jacobian of ``F`` at ``s``, shape (n, n)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    J, _ = _jacobians(F, s[None, :], eps)
    J = J[0]
    bad = ~np.all(np.isfinite(J), axis=0)
    if bad.any():
        raise NonFiniteProbeError(f"non-finite map value when probing dimension {int(np.flatnonzero(bad)[0])}")
    return J


def _mle_jacobian_batch(
    F: ClosedLoopMap, x0: np.ndarray, steps: int, transient: int, eps: float
) -> tuple[np.ndarray, list[str | None]]:
    x = np.array(x0, dtype=np.float64).reshape(-1, F.dim)
    B, n = x.shape
    offs = _probe_offsets(n, eps)
    v = np.ones((B, n)) / np.sqrt(n)
    acc = np.zeros(B)
    alive = np.ones(B, dtype=bool)
    errors: list[str | None] = [None] * B
    with np.errstate(all="ignore"):
        for t in range(steps):
            out = F((x[:, None, :] + offs).reshape(-1, n)).reshape(B, 2 * n + 1, n)
            fx = out[:, 0]
            cols = out[:, 1 : n + 1] - out[:, n + 1 :]
            # J v = sum_i v_i * column_i
            w = np.einsum("bij,bi->bj", cols, v) / (2.0 * eps)
            norm = np.sqrt(np.einsum("bj,bj->b", w, w))
            ok = np.isfinite(norm) & (norm > 0) & np.isfinite(fx).all(axis=-1)
            if not ok.all():
                for b in np.flatnonzero(alive & ~ok):
                    errors[b] = f"trajectory or tangent became non-finite at step {t + 1}"
                alive &= ok
                norm = np.where(ok, norm, 1.0)
                w = np.where(ok[:, None], w, v)
                fx = np.where(ok[:, None], fx, x)
            if t >= transient:
                acc += np.log(norm)
            v = w / norm[:, None]
            x = fx
    lam = acc / (steps - transient)
    lam[~alive] = np.nan
    return lam, errors


def _check_steps(steps: int, transient: int) -> None:
    if not steps > transient >= 0:
        raise ValueError("need steps > transient >= 0")


def mle_jacobian(
    F: ClosedLoopMap,
    s0: np.ndarray,
    steps: int = 1000,
    transient: int | None = None,
    eps: float = 1e-5,
) -> MleEstimate:
    """Tangent-vector propagation through finite-difference Jacobians, renormalised every step."""
    transient = steps // 10 if transient is None else transient
    _check_steps(steps, transient)
    s0 = np.atleast_1d(np.asarray(s0, dtype=np.float64))
    lam, errors = _mle_jacobian_batch(F, s0[None, :], steps, transient, eps)
    if errors[0] is not None:
        raise TrajectoryDivergedError(errors[0])
    return MleEstimate(float(lam[0]), steps, transient, "jacobian", s0, eps)


def mle_batch(
    F: ClosedLoopMap,
    states: Sequence[np.ndarray] | np.ndarray,
    steps: int = 1000,
    transient: int | None = None,
    eps: float = 1e-5,
) -> list[MleEstimate]:
    """One Jacobian-method estimate per initial state; failures are recorded, not raised."""
    states = np.asarray(states, dtype=np.float64).reshape(-1, F.dim)
    if states.shape[0] == 0:
        raise ValueError("need at least one initial state")
    transient = steps // 10 if transient is None else transient
    _check_steps(steps, transient)
    out = []
    # one state at a time: the result must not depend on what else is in the batch
    for s in states:
        lam, errors = _mle_jacobian_batch(F, s[None, :], steps, transient, eps)
        out.append(MleEstimate(float(lam[0]), steps, transient, "jacobian", s.copy(), eps, errors[0]))
    return out


def mle_batch_vectorized(
    F: ClosedLoopMap,
    states: np.ndarray,
    steps: int = 1000,
    transient: int | None = None,
    eps: float = 1e-5,
) -> list[MleEstimate]:
    """Same as :func:`mle_batch` but advances all states together (much faster for policies).

    Results can differ from the one-at-a-time path in the last bits because matrix
    products are blocked differently for different batch sizes.
    """
    states = np.asarray(states, dtype=np.float64).reshape(-1, F.dim)
    transient = steps // 10 if transient is None else transient
    _check_steps(steps, transient)
    lam, errors = _mle_jacobian_batch(F, states, steps, transient, eps)
    return [
        MleEstimate(float(l), steps, transient, "jacobian", s.copy(), eps, e)
        for l, s, e in zip(lam, states, errors)
    ]


def mle_direct(
    F: ClosedLoopMap,
    s0: np.ndarray,
    delta0: float = 1e-8,
    steps: int = 1000,
    renorm_interval: int = 1,
    transient: int | None = None,
) -> MleEstimate:
    """Two-trajectory estimate with periodic rescaling of the separation back to ``delta0``."""
    if not delta0 > 0:
        raise ValueError("delta0 must be positive")
    if renorm_interval < 1:
        raise ValueError("renorm_interval must be >= 1")
    transient = steps // 10 if transient is None else transient
    _check_steps(steps, transient)
    x = np.atleast_1d(np.asarray(s0, dtype=np.float64)).copy()
    s0 = x.copy()
    direction = np.ones_like(x) / np.sqrt(x.size)
    y = x + delta0 * direction
    total = 0.0
    counted = 0
    since = 0
    for t in range(steps):
        x = F(x)
        y = F(y)
        since += 1
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise TrajectoryDivergedError(f"trajectory became non-finite at step {t + 1}")
        diff = y - x
        dist = float(np.sqrt(np.sum(diff * diff)))
        # separation lost in round-off: keep the old direction and restart from delta0
        collapsed = dist <= 1e-6 * delta0
        if t < transient or collapsed or since == renorm_interval or t == steps - 1:
            if t >= transient:
                total += np.log(max(dist, np.finfo(float).tiny) / delta0)
                counted += since
            if not collapsed:
                direction = diff / dist
            y = x + delta0 * direction
            since = 0
    lam = total / counted if counted else float("nan")
    return MleEstimate(float(lam), steps, transient, "direct", s0, delta0)


def perturbation_fan(
    F: ClosedLoopMap,
    s0: np.ndarray,
    delta0: float = 1e-4,
    n_perturbed: int = 10,
    horizon: int = 400,
    rng: np.random.Generator | None = None,
) -> PerturbationFan:
    """Roll out ``s0`` and ``n_perturbed`` copies displaced by ``delta0`` along random unit directions."""
    if n_perturbed < 1 or horizon < 1:
        raise ValueError("need at least one perturbed trajectory and one step")
    if delta0 < 0:
        raise ValueError("delta0 must be non-negative")
    rng = np.random.default_rng(0) if rng is None else rng
    s0 = np.atleast_1d(np.asarray(s0, dtype=np.float64))
    dirs = rng.standard_normal((n_perturbed, s0.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    x = np.concatenate([s0[None, :], s0[None, :] + delta0 * dirs])
    traj = np.zeros((horizon + 1,) + x.shape)
    traj[0] = x
    for t in range(horizon):
        # one call per trajectory: batched matrix products round differently by row position
        with np.errstate(all="ignore"):
            nxt = np.stack([F(row[None, :])[0] for row in x])
        bad = ~np.all(np.isfinite(nxt), axis=-1)
        x = np.where(bad[:, None], x, nxt)
        traj[t + 1] = x
        traj[t + 1, bad] = np.nan
    base = traj[:, 0]
    pert = np.swapaxes(traj[:, 1:], 0, 1)
    div = np.linalg.norm(pert - base[None, :, :], axis=-1)
    div = np.where(np.isfinite(div), np.minimum(div, SATURATION), SATURATION)
    return PerturbationFan(base, pert, float(delta0), div)


def write_mle_csv(estimates: Sequence[MleEstimate], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("state_index", "lambda", "method", "steps", "transient", "epsilon"))
        for i, e in enumerate(estimates):
            w.writerow((i, repr(e.lam), e.method, e.steps, e.transient, repr(e.epsilon)))


def write_fan_csv(fan: PerturbationFan, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("trajectory_id", "step", "divergence_norm"))
        for p in range(fan.divergence.shape[0]):
            for t, d in enumerate(fan.divergence[p]):
                w.writerow((p, t, repr(float(d))))
