"""Tanh-squashed Gaussian policy and scalar value head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gift.nn import MlpParams, ShapeError, init_mlp, mlp_forward

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
# keeps atanh finite for actions sitting exactly on the bound
SQUASH_EPS = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ObsNorm:
    """Running mean / variance of observations (parallel Welford merge)."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    eps: float = 1e-8

    @classmethod
    def identity(cls, dim: int) -> "ObsNorm":
        return cls(np.zeros(dim), np.ones(dim), 0.0)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)

    def update(self, batch: np.ndarray) -> "ObsNorm":
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.shape[0])
        n = batch.shape[0]
        if n == 0:
            return self
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        if self.count == 0:
            return ObsNorm(b_mean, b_var, float(n), self.eps)
        tot = self.count + n
        delta = b_mean - self.mean
        mean = self.mean + delta * n / tot
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / tot
        return ObsNorm(mean, m2 / tot, tot, self.eps)

    def copy(self) -> "ObsNorm":
        return ObsNorm(self.mean.copy(), self.var.copy(), self.count, self.eps)


@dataclass
class PolicyParams:
    mean_net: MlpParams
    log_std: np.ndarray
    action_bound: float
    obs_norm: ObsNorm = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.log_std.shape != (self.mean_net.out_dim,):
            raise ShapeError("one log-std entry per action dimension is required")
        if self.obs_norm is None:
            self.obs_norm = ObsNorm.identity(self.mean_net.in_dim)

    @property
    def obs_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.mean_net.copy(), self.log_std.copy(), self.action_bound, self.obs_norm.copy())


@dataclass
class ValueParams:
    net: MlpParams

    def copy(self) -> "ValueParams":
        return ValueParams(self.net.copy())


def init_policy(
    obs_dim: int,
    action_dim: int,
    action_bound: float,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (64, 64),
    init_log_std: float = 0.0,
) -> PolicyParams:
    net = init_mlp([obs_dim, *hidden, action_dim], rng, hidden_gain=np.sqrt(2.0), output_gain=0.01)
    return PolicyParams(net, np.full(action_dim, float(init_log_std)), float(action_bound))


def init_value(obs_dim: int, rng: np.random.Generator, hidden: tuple[int, ...] = (64, 64)) -> ValueParams:
    return ValueParams(init_mlp([obs_dim, *hidden, 1], rng, hidden_gain=np.sqrt(2.0), output_gain=1.0))


def pre_squash_mean(policy: PolicyParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != policy.obs_dim:
        raise ShapeError(f"observation width {obs.shape[-1]} but policy expects {policy.obs_dim}")
    return mlp_forward(policy.mean_net, policy.obs_norm.normalize(obs))


def act_deterministic(policy: PolicyParams, obs: np.ndarray) -> np.ndarray:
    return policy.action_bound * np.tanh(pre_squash_mean(policy, obs))


def log_squash_jacobian(raw: np.ndarray, bound: float) -> np.ndarray:
    """log |d(bound * tanh(raw)) / d raw| summed over action dims, overflow-safe."""
    per_dim = np.log(bound) + 2.0 * (np.log(2.0) - raw - np.logaddexp(0.0, -2.0 * raw))
    return per_dim.sum(axis=-1)


def gaussian_log_prob(raw: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (raw - mean) * np.exp(-log_std)
    return (-0.5 * z**2 - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


def unsquash(action: np.ndarray, bound: float) -> np.ndarray:
    y = np.clip(np.asarray(action, dtype=np.float64) / bound, -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)
    return np.arctanh(y)


def log_prob_of(policy: PolicyParams, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Density of a squashed action: Gaussian on the pre-squash value minus the tanh log-Jacobian."""
    raw = unsquash(action, policy.action_bound)
    mean = pre_squash_mean(policy, obs)
    return gaussian_log_prob(raw, mean, policy.log_std) - log_squash_jacobian(raw, policy.action_bound)


def sample_raw(
    policy: PolicyParams, obs: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw pre-squash values. Returns (action, raw, gaussian log-prob of raw)."""
    mean = pre_squash_mean(policy, obs)
    raw = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)
    action = np.clip(policy.action_bound * np.tanh(raw), -policy.action_bound, policy.action_bound)
    return action, raw, gaussian_log_prob(raw, mean, policy.log_std)


def act_stochastic(
    policy: PolicyParams, obs: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    action, _, _ = sample_raw(policy, obs, rng)
    return action, log_prob_of(policy, obs, action)


def entropy(policy: PolicyParams) -> float:
    """Entropy of the pre-squash Gaussian (the squash correction is state dependent and ignored)."""
    return float(np.sum(policy.log_std + 0.5 * (_LOG_2PI + 1.0)))


def value_of(value: ValueParams, policy: PolicyParams, obs: np.ndarray) -> np.ndarray:
    """State values; the critic reads observations through the policy's normaliser."""
    return mlp_forward(value.net, policy.obs_norm.normalize(obs))[..., 0]
