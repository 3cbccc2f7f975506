"""On-policy PPO with GAE for the built-in environments (and anything wrapping them).

A rollout target is either an :class:`~gift.env.EnvSpec` (task reward) or any object
with an ``env`` attribute and a ``rewards(x, u, x_next)`` method returning
``(reward, task_reward)``; the stabilising wrapper in :mod:`gift.smdp` is one.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from gift import env as envlib
from gift.nn import AdamState, MlpParams, adam_update, clip_by_global_norm, mlp_backward, mlp_forward
from gift.policy import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    PolicyParams,
    ValueParams,
    entropy,
    gaussian_log_prob,
    sample_raw,
    value_of,
)

log = logging.getLogger(__name__)

REPORT_HEADER = ("iter", "timesteps", "mean_return", "policy_loss", "value_loss", "entropy", "wallclock_s")


@dataclass
class PpoConfig:
    gamma: float = 0.995
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 16
    n_minibatches: int = 32
    entropy_cost: float = 1e-3
    learning_rate: float = 1e-3
    total_timesteps: int = 200_000
    unroll_length: int = 30
    n_envs: int = 16
    reward_scaling: float = 1.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    update_obs_norm: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        for name in ("epochs", "n_minibatches", "unroll_length", "n_envs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_timesteps < 0:
            raise ValueError("total_timesteps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.unroll_length

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class RolloutBuffer:
    """Time-major arrays, shape (unroll_length, n_envs, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    raw_actions: np.ndarray
    rewards: np.ndarray
    task_rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    # value to bootstrap from where an episode ends: V(final obs) on time-limit, 0 on divergence
    boundary_values: np.ndarray
    last_obs: np.ndarray
    episode_returns: list[float] = field(default_factory=list)
    episode_task_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.rewards.size)


@dataclass
class RolloutCarry:
    """Environment state that persists between successive collections."""

    x: np.ndarray
    t: np.ndarray
    ret: np.ndarray
    task_ret: np.ndarray


@dataclass
class TrainReport:
    rows: list[dict[str, float]] = field(default_factory=list)
    # side-channel task returns; equal to mean_return when training on the task reward
    task_returns: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r[k] for k in REPORT_HEADER])

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=np.float64)


def _split_target(target: Any) -> tuple[envlib.EnvSpec, Any]:
    if isinstance(target, envlib.EnvSpec):
        return target, None
    return target.env, target


def _rewards(spec: envlib.EnvSpec, wrapper: Any, x, u, x_next) -> tuple[np.ndarray, np.ndarray]:
    if wrapper is None:
        r = envlib.task_reward(spec, x, u)
        return r, r
    return wrapper.rewards(x, u, x_next)


def init_carry(spec: envlib.EnvSpec, n_envs: int, rng: np.random.Generator) -> RolloutCarry:
    return RolloutCarry(envlib.reset(spec, rng, n_envs), np.zeros(n_envs, dtype=np.int64), np.zeros(n_envs), np.zeros(n_envs))


def collect_rollouts(
    target: Any,
    policy: PolicyParams,
    value: ValueParams,
    cfg: PpoConfig,
    rng: np.random.Generator,
    carry: RolloutCarry | None = None,
) -> tuple[RolloutBuffer, RolloutCarry]:
    """Step ``cfg.n_envs`` environments for ``cfg.unroll_length`` steps with the stochastic policy."""
    spec, wrapper = _split_target(target)
    if carry is None:
        carry = init_carry(spec, cfg.n_envs, rng)
    T, N = cfg.unroll_length, cfg.n_envs
    obs_buf = np.zeros((T, N, spec.obs_dim))
    act_buf = np.zeros((T, N, spec.action_dim))
    raw_buf = np.zeros((T, N, spec.action_dim))
    rew_buf = np.zeros((T, N))
    task_buf = np.zeros((T, N))
    val_buf = np.zeros((T, N))
    logp_buf = np.zeros((T, N))
    done_buf = np.zeros((T, N), dtype=bool)
    bval_buf = np.zeros((T, N))
    ep_returns: list[float] = []
    ep_task: list[float] = []

    x, t = carry.x.copy(), carry.t.copy()
    ret, task_ret = carry.ret.copy(), carry.task_ret.copy()
    for step in range(T):
        obs = envlib.observe(spec, x)
        action, raw, logp = sample_raw(policy, obs, rng)
        v = value_of(value, policy, obs)
        with np.errstate(all="ignore"):
            x_next = envlib.rk4(spec, x, action)
        diverged = ~np.all(np.isfinite(x_next), axis=-1)
        if diverged.any():
            # keep the arrays finite; those episodes end here
            x_next[diverged] = x[diverged]
        r, r_task = _rewards(spec, wrapper, x, action, x_next)
        r = np.where(diverged, 0.0, r)
        r_task = np.where(diverged, 0.0, r_task)
        t = t + 1
        truncated = (t >= spec.episode_len) & ~diverged
        done = truncated | diverged

        obs_buf[step], act_buf[step], raw_buf[step] = obs, action, raw
        rew_buf[step] = r * cfg.reward_scaling
        task_buf[step] = r_task
        val_buf[step], logp_buf[step], done_buf[step] = v, logp, done
        if truncated.any():
            bval_buf[step, truncated] = value_of(value, policy, envlib.observe(spec, x_next[truncated]))

        ret += r
        task_ret += r_task
        if done.any():
            idx = np.flatnonzero(done)
            ep_returns += ret[idx].tolist()
            ep_task += task_ret[idx].tolist()
            ret[idx] = 0.0
            task_ret[idx] = 0.0
            t[idx] = 0
            x_next[idx] = envlib.reset(spec, rng, len(idx))
        x = x_next

    buf = RolloutBuffer(
        obs_buf, act_buf, raw_buf, rew_buf, task_buf, val_buf, logp_buf, done_buf, bval_buf,
        envlib.observe(spec, x), ep_returns, ep_task,
    )
    return buf, RolloutCarry(x, t, ret, task_ret)


def compute_gae(
    buffer: RolloutBuffer,
    gamma: float,
    lam: float,
    bootstrap_values: np.ndarray,
    normalize: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and value targets, shape (T, N).

    Value targets are always computed from the raw advantages; only the returned
    advantages are normalised (mean 0, std 1 over the whole batch) when asked.
    """
    rewards = np.asarray(buffer.rewards, dtype=np.float64)
    values = np.asarray(buffer.values, dtype=np.float64)
    dones = np.asarray(buffer.dones, dtype=bool)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    gae = np.zeros(rewards.shape[1:])
    next_v = np.asarray(bootstrap_values, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        nv = np.where(dones[t], buffer.boundary_values[t], next_v)
        delta = rewards[t] + gamma * nv - values[t]
        gae = delta + gamma * lam * np.where(dones[t], 0.0, gae)
        adv[t] = gae
        next_v = values[t]
    targets = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, targets


def clipped_surrogate(
    log_ratio: np.ndarray, adv: np.ndarray, clip: float
) -> tuple[float, np.ndarray]:
    """PPO policy loss ``-mean(min(r A, clip(r) A))`` and its gradient w.r.t. the new log-prob."""
    ratio = np.exp(log_ratio)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    loss = -float(np.mean(np.minimum(s1, s2)))
    # the unclipped branch carries gradient wherever it is the active minimum
    active = s1 <= s2
    grad = np.where(active, -adv * ratio, 0.0) / adv.size
    return loss, grad


def _policy_arrays(policy: PolicyParams) -> list[np.ndarray]:
    return policy.mean_net.arrays() + [policy.log_std]


def _policy_from_arrays(policy: PolicyParams, arrays: list[np.ndarray]) -> PolicyParams:
    net = MlpParams.from_arrays(arrays[:-1], policy.mean_net.activation)
    log_std = np.clip(arrays[-1], LOG_STD_MIN, LOG_STD_MAX)
    return PolicyParams(net, log_std, policy.action_bound, policy.obs_norm)


def minibatch_grads(
    policy: PolicyParams,
    value: ValueParams,
    obs_n: np.ndarray,
    raw: np.ndarray,
    old_logp: np.ndarray,
    adv: np.ndarray,
    targets: np.ndarray,
    cfg: PpoConfig,
) -> tuple[dict[str, float], list[np.ndarray], list[np.ndarray]]:
    """Losses and gradients for one minibatch of normalised observations."""
    mean = mlp_forward(policy.mean_net, obs_n)
    std = np.exp(policy.log_std)
    new_logp = gaussian_log_prob(raw, mean, policy.log_std)
    pol_loss, g_logp = clipped_surrogate(new_logp - old_logp, adv, cfg.clip_ratio)
    z = (raw - mean) / std
    g_mean = g_logp[:, None] * z / std
    g_log_std = (g_logp[:, None] * (z**2 - 1.0)).sum(axis=0) - cfg.entropy_cost
    net_g = mlp_backward(policy.mean_net, obs_n, g_mean)
    pol_grads = net_g.arrays() + [g_log_std]

    v = mlp_forward(value.net, obs_n)[:, 0]
    err = v - targets
    val_loss = 0.5 * float(np.mean(err**2))
    g_v = (cfg.value_coef * err / err.size)[:, None]
    val_grads = mlp_backward(value.net, obs_n, g_v).arrays()
    ent = entropy(policy)
    losses = dict(policy_loss=pol_loss, value_loss=val_loss, entropy=ent)
    return losses, pol_grads, val_grads


def _clip_arrays(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= max_norm or norm == 0.0:
        return grads
    return [g * (max_norm / norm) for g in grads]


def ppo_update(
    policy: PolicyParams,
    value: ValueParams,
    buffer: RolloutBuffer,
    advantages: np.ndarray,
    targets: np.ndarray,
    cfg: PpoConfig,
    opt_states: tuple[AdamState, AdamState],
    rng: np.random.Generator,
) -> tuple[PolicyParams, ValueParams, tuple[AdamState, AdamState], dict[str, float]]:
    """Clipped-surrogate epochs over shuffled minibatches; returns mean losses."""
    pol_opt, val_opt = opt_states
    obs = buffer.obs.reshape(-1, buffer.obs.shape[-1])
    obs_n = policy.obs_norm.normalize(obs)
    raw = buffer.raw_actions.reshape(-1, buffer.raw_actions.shape[-1])
    old_logp = buffer.log_probs.reshape(-1)
    adv = np.asarray(advantages).reshape(-1)
    tgt = np.asarray(targets).reshape(-1)
    n = obs.shape[0]
    n_mb = min(cfg.n_minibatches, n)
    sums = dict(policy_loss=0.0, value_loss=0.0, entropy=0.0)
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for idx in np.array_split(perm, n_mb):
            losses, pg, vg = minibatch_grads(
                policy, value, obs_n[idx], raw[idx], old_logp[idx], adv[idx], tgt[idx], cfg
            )
            if not all(np.isfinite(v) for v in losses.values()) or not all(
                np.all(np.isfinite(g)) for g in pg + vg
            ):
                log.warning("non-finite PPO loss or gradient; minibatch update skipped")
                continue
            pg = _clip_arrays(pg, cfg.max_grad_norm)
            vg = _clip_arrays(vg, cfg.max_grad_norm)
            pol_opt, arrays = adam_update(pol_opt, _policy_arrays(policy), pg)
            policy = _policy_from_arrays(policy, arrays)
            val_opt, varrays = adam_update(val_opt, value.net.arrays(), vg)
            value = ValueParams(MlpParams.from_arrays(varrays, value.net.activation))
            for k in sums:
                sums[k] += losses[k]
            count += 1
    means = {k: (v / count if count else float("nan")) for k, v in sums.items()}
    return policy, value, (pol_opt, val_opt), means


def fresh_optimizers(policy: PolicyParams, value: ValueParams, lr: float) -> tuple[AdamState, AdamState]:
    return (
        AdamState.for_arrays(_policy_arrays(policy), lr=lr),
        AdamState.for_arrays(value.net.arrays(), lr=lr),
    )


def train(
    target: Any,
    policy: PolicyParams,
    value: ValueParams,
    cfg: PpoConfig,
    rng: np.random.Generator,
    opt_states: tuple[AdamState, AdamState] | None = None,
) -> tuple[PolicyParams, ValueParams, TrainReport]:
    """Collect/update until ``cfg.total_timesteps`` environment steps have been used.

    The number of updates is ``total_timesteps // (n_envs * unroll_length)``.
    """
    spec, _ = _split_target(target)
    if spec.obs_dim != policy.obs_dim:
        raise ValueError(f"policy expects {policy.obs_dim}-wide observations, environment gives {spec.obs_dim}")
    policy, value = policy.copy(), value.copy()
    if opt_states is None:
        opt_states = fresh_optimizers(policy, value, cfg.learning_rate)
    report = TrainReport()
    n_iters = cfg.total_timesteps // cfg.batch_size
    carry = init_carry(spec, cfg.n_envs, rng) if n_iters else None
    last_ret, last_task = float("nan"), float("nan")
    start = time.perf_counter()
    for it in range(n_iters):
        buf, carry = collect_rollouts(target, policy, value, cfg, rng, carry)
        boot = value_of(value, policy, buf.last_obs)
        adv, tgt = compute_gae(buf, cfg.gamma, cfg.gae_lambda, boot)
        policy, value, opt_states, losses = ppo_update(policy, value, buf, adv, tgt, cfg, opt_states, rng)
        if cfg.update_obs_norm:
            policy.obs_norm = policy.obs_norm.update(buf.obs)
        if buf.episode_returns:
            last_ret = float(np.mean(buf.episode_returns))
            last_task = float(np.mean(buf.episode_task_returns))
        report.rows.append(
            dict(
                iter=it,
                timesteps=(it + 1) * cfg.batch_size,
                mean_return=last_ret,
                policy_loss=losses["policy_loss"],
                value_loss=losses["value_loss"],
                entropy=losses["entropy"],
                wallclock_s=time.perf_counter() - start,
            )
        )
        report.task_returns.append(last_task)
        if it % 50 == 0 or it == n_iters - 1:
            log.info("iter %d/%d return %.2f task %.2f", it + 1, n_iters, last_ret, last_task)
    return policy, value, report
