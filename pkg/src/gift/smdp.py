"""Stabilising wrapper: reference trajectory, nearest-successor targets, inverse-quadratic reward.

The wrapped environment keeps its dynamics, observations and actions. Only the
training reward changes, to ``1 / ((kappa * ||o_next - target(o_t)||)^2 + 1)``
where ``target(o_t)`` is the successor of the reference point closest to ``o_t``.
Distances are measured on observations passed through a frozen normaliser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gift import env as envlib
from gift.policy import ObsNorm, PolicyParams, ValueParams, act_deterministic
from gift.trainer import PpoConfig, TrainReport, train

DEFAULT_KAPPA = math.sqrt(17.0 / 3.0)
OVERFLOW_POLICIES = ("clamp", "hold")
TRAJ_MAGIC = "# gift-reference v1"


class NoValidReferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GiftRewardConfig:
    """``overflow`` decides what happens when the closest point is the last one.

    ``clamp`` returns the last point itself. ``hold`` leaves the last point out of
    the search, so the target is the successor of the closest point that has one.
    """

    kappa: float = DEFAULT_KAPPA
    overflow: str = "clamp"
    metric: str = "normalized-euclidean"

    def __post_init__(self) -> None:
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.overflow not in OVERFLOW_POLICIES:
            raise ValueError(f"overflow must be one of {OVERFLOW_POLICIES}")
        if self.metric not in ("normalized-euclidean", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class ReferenceTrajectory:
    observations: np.ndarray  # (L, k)
    total_reward: float
    n_candidates: int
    seed: int
    kappa: float = DEFAULT_KAPPA
    initial_state: np.ndarray | None = None
    actions: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.observations = np.asarray(self.observations, dtype=np.float64)
        if self.observations.ndim != 2 or self.observations.shape[0] < 2:
            raise ValueError("a reference needs at least two observations")
        if not np.all(np.isfinite(self.observations)):
            raise ValueError("reference observations must be finite")

    @property
    def length(self) -> int:
        return self.observations.shape[0]

    @property
    def width(self) -> int:
        return self.observations.shape[1]


def _as_points(T) -> np.ndarray:
    return T.observations if isinstance(T, ReferenceTrajectory) else np.asarray(T, dtype=np.float64)


def nearest_index(T, o: np.ndarray, cfg: GiftRewardConfig = GiftRewardConfig()) -> np.ndarray:
    """Index of the closest reference point (first one on ties); batched over leading dims of ``o``."""
    pts = _as_points(T)
    if cfg.overflow == "hold":
        pts = pts[:-1]
    o = np.asarray(o, dtype=np.float64)
    if o.shape[-1] != pts.shape[-1]:
        raise ValueError(f"observation width {o.shape[-1]} does not match reference width {pts.shape[-1]}")
    # squared distances keep exact ties exact
    d2 = np.sum((o[..., None, :] - pts) ** 2, axis=-1)
    return np.argmin(d2, axis=-1)


def target_index(T, o: np.ndarray, cfg: GiftRewardConfig = GiftRewardConfig()) -> np.ndarray:
    pts = _as_points(T)
    return np.minimum(nearest_index(pts, o, cfg) + 1, pts.shape[0] - 1)


def target_observation(T, o: np.ndarray, cfg: GiftRewardConfig = GiftRewardConfig()) -> np.ndarray:
    pts = _as_points(T)
    return pts[target_index(pts, o, cfg)]


def reward_from_distance(d: np.ndarray, kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    return 1.0 / ((kappa * np.asarray(d, dtype=np.float64)) ** 2 + 1.0)


def gift_reward(T, o_t: np.ndarray, o_next: np.ndarray, cfg: GiftRewardConfig = GiftRewardConfig()) -> np.ndarray:
    """Inverse-quadratic closeness of ``o_next`` to the target chosen for ``o_t``; in (0, 1]."""
    tgt = target_observation(T, o_t, cfg)
    d = np.sqrt(np.sum((np.asarray(o_next, dtype=np.float64) - tgt) ** 2, axis=-1))
    return reward_from_distance(d, cfg.kappa)


@dataclass
class SmdpSpec:
    """An environment whose reward is replaced by the stabilising reward."""

    env: envlib.EnvSpec
    reference: ReferenceTrajectory
    cfg: GiftRewardConfig = field(default_factory=GiftRewardConfig)
    obs_norm: ObsNorm | None = None

    def __post_init__(self) -> None:
        if self.reference.width != self.env.obs_dim:
            raise ValueError(
                f"reference width {self.reference.width} does not match {self.env.env_id} observations "
                f"({self.env.obs_dim})"
            )
        self._points = self.metric(self.reference.observations)

    def metric(self, obs: np.ndarray) -> np.ndarray:
        """Map observations into the space where distances are measured."""
        if self.cfg.metric == "euclidean" or self.obs_norm is None:
            return np.asarray(obs, dtype=np.float64)
        return self.obs_norm.normalize(obs)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def rewards(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(stabilising reward, task reward) for the transition ``x --u--> x_next``."""
        o_t = self.metric(envlib.observe(self.env, x))
        o_n = self.metric(envlib.observe(self.env, x_next))
        return gift_reward(self._points, o_t, o_n, self.cfg), envlib.task_reward(self.env, x, u)


def make_smdp(
    spec: envlib.EnvSpec,
    T: ReferenceTrajectory,
    cfg: GiftRewardConfig = GiftRewardConfig(),
    obs_norm: ObsNorm | None = None,
) -> SmdpSpec:
    return SmdpSpec(spec, T, cfg, obs_norm)


def smdp_step(smdp: SmdpSpec, state: envlib.EnvState, action: np.ndarray):
    """Advance one step. Returns (next state, next observation, stabilising reward, task reward)."""
    nxt = envlib.rk4_step(smdp.env, state, action)
    u = envlib.clamp_action(smdp.env, action)
    r, r_task = smdp.rewards(state.x, u, nxt.x)
    return nxt, envlib.observe(smdp.env, nxt.x), float(r), float(r_task)


def rollout_deterministic(spec: envlib.EnvSpec, policy: PolicyParams, x0: np.ndarray, length: int):
    """Batched deterministic rollouts from ``x0`` (N, n).

    Returns (observations (N, L, k), actions (N, L, m), total task reward (N,), diverged (N,)).
    """
    x = np.array(x0, dtype=np.float64)
    n = x.shape[0]
    obs = np.zeros((n, length, spec.obs_dim))
    acts = np.zeros((n, length, spec.action_dim))
    total = np.zeros(n)
    diverged = np.zeros(n, dtype=bool)
    for t in range(length):
        o = envlib.observe(spec, x)
        u = act_deterministic(policy, o)
        obs[:, t], acts[:, t] = o, u
        total += np.where(diverged, 0.0, envlib.task_reward(spec, x, u))
        with np.errstate(all="ignore"):
            x_next = envlib.rk4(spec, x, u)
        bad = ~np.all(np.isfinite(x_next), axis=-1)
        diverged |= bad
        x = np.where(bad[:, None], x, x_next)
    return obs, acts, total, diverged


def generate_reference(
    spec: envlib.EnvSpec,
    policy: PolicyParams,
    n_rollouts: int,
    length: int,
    rng: np.random.Generator,
    seed: int = 0,
    kappa: float = DEFAULT_KAPPA,
) -> ReferenceTrajectory:
    """Roll out the deterministic policy from ``n_rollouts`` initial states and keep the best one."""
    if n_rollouts < 1 or length < 2:
        raise ValueError("need n_rollouts >= 1 and length >= 2")
    x0 = envlib.reset(spec, rng, n_rollouts)
    obs, acts, total, diverged = rollout_deterministic(spec, policy, x0, length)
    if diverged.all():
        raise NoValidReferenceError(f"all {n_rollouts} candidate rollouts diverged")
    score = np.where(diverged, -np.inf, total)
    best = int(np.argmax(score))
    return ReferenceTrajectory(obs[best], float(total[best]), n_rollouts, seed, kappa, x0[best].copy(), acts[best].copy())


def gift_finetune(
    smdp: SmdpSpec,
    policy: PolicyParams,
    value: ValueParams,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> tuple[PolicyParams, ValueParams, TrainReport]:
    """PPO on the stabilising reward with fresh optimiser moments and frozen observation statistics."""
    cfg = replace(cfg, update_obs_norm=False)
    return train(smdp, policy, value, cfg, rng)


def save_reference(T: ReferenceTrajectory, path: str | Path) -> None:
    """Text artifact: a magic line, a ``key=value`` header line, then L rows of k floats."""
    head = dict(L=T.length, k=T.width, kappa=repr(float(T.kappa)), seed=T.seed,
                total_reward=repr(float(T.total_reward)), n_candidates=T.n_candidates)
    lines = [TRAJ_MAGIC, "# " + " ".join(f"{k}={v}" for k, v in head.items())]
    if T.initial_state is not None:
        lines.append("# initial_state=" + ",".join(repr(float(v)) for v in T.initial_state))
    if T.actions is not None:
        lines.append("# actions=" + ";".join(",".join(repr(float(v)) for v in row) for row in T.actions))
    lines += [" ".join(repr(float(v)) for v in row) for row in T.observations]
    Path(path).write_text("\n".join(lines) + "\n")


def load_reference(path: str | Path) -> ReferenceTrajectory:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != TRAJ_MAGIC:
        raise ValueError(f"{path}: not a reference trajectory file")
    head = dict(item.split("=", 1) for item in text[1][2:].split())
    extras: dict[str, str] = {}
    rows = []
    for line in text[2:]:
        if line.startswith("# "):
            key, val = line[2:].split("=", 1)
            extras[key] = val
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    obs = np.array(rows, dtype=np.float64)
    if obs.shape != (int(head["L"]), int(head["k"])):
        raise ValueError(f"{path}: header says {head['L']}x{head['k']} but found {obs.shape}")
    x0 = np.array([float(v) for v in extras["initial_state"].split(",")]) if "initial_state" in extras else None
    acts = (
        np.array([[float(v) for v in r.split(",")] for r in extras["actions"].split(";")])
        if "actions" in extras
        else None
    )
    return ReferenceTrajectory(
        obs, float(head["total_reward"]), int(head["n_candidates"]), int(head["seed"]),
        float(head["kappa"]), x0, acts,
    )
