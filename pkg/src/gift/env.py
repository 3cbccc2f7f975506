"""Deterministic ODE control tasks: pendulum swing-up, cartpole swing-up, two-link reacher.

All array-level functions accept a single state ``(n,)`` or a batch ``(..., n)``.
Angles are measured from the upright (pendulum/cartpole) and are never wrapped in
the raw state; the observation map encodes them as (sin, cos) pairs.

Equations of motion (``u`` is the clamped control, ``b`` a viscous coefficient):

pendulum, state (theta, omega)::

    theta'' = (g / l) sin(theta) + (u - b omega) / (m l^2)

cartpole, state (x, theta, xdot, thetadot), point mass ``mp`` at distance ``l``::

    (mc + mp) x'' + mp l cos(theta) theta'' - mp l sin(theta) thetadot^2 = u - b_cart xdot
    mp l cos(theta) x'' + mp l^2 theta''   - mp g l sin(theta)           = -b_pole thetadot

two-link planar arm (horizontal plane, point masses at the link ends), state (q1, q2, dq1, dq2)::

    M(q) q'' + c(q, dq) = u - b dq
    M11 = (m1 + m2) l1^2 + m2 l2^2 + 2 m2 l1 l2 cos q2
    M12 = m2 l2^2 + m2 l1 l2 cos q2,   M22 = m2 l2^2
    c   = m2 l1 l2 sin q2 * (-(2 dq1 dq2 + dq2^2), dq1^2)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np


class DivergedStateError(FloatingPointError):
    """Integration produced a non-finite state."""


ENV_IDS = ("pendulum", "cartpole", "reacher")
REWARD_VARIANTS = ("full", "underspecified")


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    obs_dim: int
    action_dim: int
    action_bound: float
    dt: float
    constants: dict[str, float]
    episode_len: int
    reward_variant: str
    init_center: tuple[float, ...]
    init_half_width: tuple[float, ...]
    # reward kernel widths and the target configuration
    reward: dict[str, float] = field(default_factory=dict)
    angle_dims: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.env_id not in ENV_IDS:
            raise ValueError(f"unknown environment {self.env_id!r}")
        if self.reward_variant not in REWARD_VARIANTS:
            raise ValueError(f"reward_variant must be one of {REWARD_VARIANTS}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.action_bound > 0:
            raise ValueError("action_bound must be positive")
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        if len(self.init_center) != self.state_dim or len(self.init_half_width) != self.state_dim:
            raise ValueError("initial-state box must have one entry per state dimension")
        if min(self.init_half_width) < 0:
            raise ValueError("initial-state half-widths must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["init_center"] = list(self.init_center)
        d["init_half_width"] = list(self.init_half_width)
        d["angle_dims"] = list(self.angle_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EnvSpec":
        d = dict(d)
        d["init_center"] = tuple(float(v) for v in d["init_center"])
        d["init_half_width"] = tuple(float(v) for v in d["init_half_width"])
        d["angle_dims"] = tuple(int(v) for v in d.get("angle_dims", ()))
        d["constants"] = {k: float(v) for k, v in d["constants"].items()}
        d["reward"] = {k: float(v) for k, v in d.get("reward", {}).items()}
        return cls(**d)


@dataclass
class EnvState:
    x: np.ndarray
    step: int = 0


_DEFAULTS: dict[str, dict[str, Any]] = {
    "pendulum": dict(
        state_dim=2,
        obs_dim=3,
        action_dim=1,
        action_bound=4.0,
        constants=dict(m=1.0, l=1.0, g=9.81, b=0.05),
        init_center=(np.pi, 0.0),
        init_half_width=(np.pi, 1.0),
        reward=dict(angle_margin=0.5, angle_bound=0.0, vel_margin=2.0, ctrl_weight=0.2),
        angle_dims=(0,),
    ),
    "cartpole": dict(
        state_dim=4,
        obs_dim=5,
        action_dim=1,
        action_bound=10.0,
        constants=dict(mc=1.0, mp=0.1, l=0.5, g=9.81, b_cart=0.1, b_pole=0.002),
        init_center=(0.0, np.pi, 0.0, 0.0),
        init_half_width=(0.5, np.pi, 0.2, 0.5),
        reward=dict(angle_margin=0.5, angle_bound=0.0, pos_margin=0.5, vel_margin=2.0, ctrl_weight=0.2),
        angle_dims=(1,),
    ),
    "reacher": dict(
        state_dim=4,
        obs_dim=6,
        action_dim=2,
        action_bound=1.0,
        constants=dict(m1=1.0, m2=1.0, l1=0.5, l2=0.5, b=0.1, q1_target=np.pi / 4, q2_target=np.pi / 3),
        init_center=(0.0, 0.0, 0.0, 0.0),
        init_half_width=(np.pi, np.pi, 0.5, 0.5),
        reward=dict(angle_margin=0.5, angle_bound=0.0, pos_margin=0.2, vel_margin=2.0, ctrl_weight=0.2),
        angle_dims=(0, 1),
    ),
}


def make_spec(
    env_id: str = "pendulum",
    reward_variant: str = "full",
    dt: float = 0.02,
    episode_len: int = 400,
    **overrides: Any,
) -> EnvSpec:
    """Build an ``EnvSpec`` from the built-in defaults.

    ``constants`` and ``reward`` overrides are merged into the defaults rather than
    replacing them.
    """
    if env_id not in _DEFAULTS:
        raise ValueError(f"unknown environment {env_id!r}; choose from {ENV_IDS}")
    base = dict(_DEFAULTS[env_id])
    for key in ("constants", "reward"):
        merged = dict(base[key])
        merged.update(overrides.pop(key, {}) or {})
        base[key] = merged
    base.update(overrides)
    base["init_center"] = tuple(float(v) for v in base["init_center"])
    base["init_half_width"] = tuple(float(v) for v in base["init_half_width"])
    return EnvSpec(env_id=env_id, dt=dt, episode_len=episode_len, reward_variant=reward_variant, **base)


def reset(spec: EnvSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform draw from the initial-state box; shape (state_dim,) or (n, state_dim)."""
    center = np.asarray(spec.init_center)
    half = np.asarray(spec.init_half_width)
    shape = (spec.state_dim,) if n is None else (n, spec.state_dim)
    return center + half * rng.uniform(-1.0, 1.0, size=shape)


def reset_state(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    return EnvState(reset(spec, rng), 0)


def clamp_action(spec: EnvSpec, u: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=np.float64), -spec.action_bound, spec.action_bound)


def derivative(spec: EnvSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Time derivative of the state; ``u`` is used as given (no clamping)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape[-1] != spec.state_dim or u.shape[-1] != spec.action_dim:
        raise ValueError(f"state/action widths {x.shape[-1]}/{u.shape[-1]} do not match {spec.env_id}")
    c = spec.constants
    if spec.env_id == "pendulum":
        th, om = x[..., 0], x[..., 1]
        acc = (c["g"] / c["l"]) * np.sin(th) + (u[..., 0] - c["b"] * om) / (c["m"] * c["l"] ** 2)
        return np.stack([om, acc], axis=-1)
    if spec.env_id == "cartpole":
        return _cartpole_derivative(c, x, u[..., 0])
    return _reacher_derivative(c, x, u)


def _cartpole_derivative(c: dict[str, float], x: np.ndarray, force: np.ndarray) -> np.ndarray:
    mc, mp, l, g = c["mc"], c["mp"], c["l"], c["g"]
    _, th, xd, thd = np.moveaxis(x, -1, 0)
    s, co = np.sin(th), np.cos(th)
    m11 = mc + mp
    m12 = mp * l * co
    m22 = mp * l * l
    r1 = force - c["b_cart"] * xd + mp * l * s * thd**2
    r2 = -c["b_pole"] * thd + mp * g * l * s
    det = m11 * m22 - m12 * m12
    xdd = (m22 * r1 - m12 * r2) / det
    thdd = (m11 * r2 - m12 * r1) / det
    return np.stack([xd, thd, xdd, thdd], axis=-1)


def _reacher_derivative(c: dict[str, float], x: np.ndarray, u: np.ndarray) -> np.ndarray:
    m1, m2, l1, l2 = c["m1"], c["m2"], c["l1"], c["l2"]
    _, q2, dq1, dq2 = np.moveaxis(x, -1, 0)
    c2, s2 = np.cos(q2), np.sin(q2)
    m11 = (m1 + m2) * l1**2 + m2 * l2**2 + 2 * m2 * l1 * l2 * c2
    m12 = m2 * l2**2 + m2 * l1 * l2 * c2
    m22 = m2 * l2**2 * np.ones_like(q2)
    h = m2 * l1 * l2 * s2
    r1 = u[..., 0] - c["b"] * dq1 + h * (2 * dq1 * dq2 + dq2**2)
    r2 = u[..., 1] - c["b"] * dq2 - h * dq1**2
    det = m11 * m22 - m12 * m12
    dd1 = (m22 * r1 - m12 * r2) / det
    dd2 = (m11 * r2 - m12 * r1) / det
    return np.stack([dq1, dq2, dd1, dd2], axis=-1)


def rk4_generic(f, x: np.ndarray, h: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step of ``x' = f(x)``."""
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4(spec: EnvSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One RK4 step of length ``spec.dt`` with the clamped action held constant."""
    u = clamp_action(spec, u)
    return rk4_generic(lambda y: derivative(spec, y, u), np.asarray(x, dtype=np.float64), spec.dt)


def rk4_step(spec: EnvSpec, state: EnvState, action: np.ndarray) -> EnvState:
    x = np.asarray(state.x, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(action))):
        raise DivergedStateError(f"non-finite input at step {state.step}")
    nxt = rk4(spec, x, action)
    if not np.all(np.isfinite(nxt)):
        raise DivergedStateError(f"state diverged at step {state.step + 1}")
    return EnvState(nxt, state.step + 1)


def observe(spec: EnvSpec, x: np.ndarray) -> np.ndarray:
    """Angles become (sin, cos) pairs in place; other coordinates pass through."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(spec.state_dim):
        if i in spec.angle_dims:
            cols += [np.sin(x[..., i]), np.cos(x[..., i])]
        else:
            cols.append(x[..., i])
    return np.stack(cols, axis=-1)


def tolerance(d: np.ndarray, bound: float, margin: float) -> np.ndarray:
    """1 for ``d <= bound``, Gaussian fall-off of width ``margin`` beyond it."""
    excess = np.maximum(np.asarray(d, dtype=np.float64) - bound, 0.0)
    return np.exp(-((excess / margin) ** 2))


def _chord(angle: np.ndarray, target: float = 0.0) -> np.ndarray:
    # distance between the unit-circle points of two angles; smooth, wrap-free
    return 2.0 * np.abs(np.sin(0.5 * (angle - target)))


def _control_factor(spec: EnvSpec, u: np.ndarray) -> np.ndarray:
    w = spec.reward["ctrl_weight"]
    frac = np.mean((clamp_action(spec, u) / spec.action_bound) ** 2, axis=-1)
    return 1.0 - w * frac


def task_reward(spec: EnvSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-step task reward in [0, 1].

    The full variant multiplies proximity in every state coordinate with a mild
    control factor. The underspecified variant only looks at the designated subset
    (pendulum and cartpole: pole angle; reacher: fingertip position).
    """
    x = np.asarray(x, dtype=np.float64)
    r, c = spec.reward, spec.constants
    ang_b, ang_m, vel_m = r["angle_bound"], r["angle_margin"], r["vel_margin"]
    if spec.env_id == "pendulum":
        angle_term = tolerance(_chord(x[..., 0]), ang_b, ang_m)
        if spec.reward_variant == "underspecified":
            return angle_term
        return angle_term * tolerance(np.abs(x[..., 1]), 0.0, vel_m) * _control_factor(spec, u)
    if spec.env_id == "cartpole":
        angle_term = tolerance(_chord(x[..., 1]), ang_b, ang_m)
        if spec.reward_variant == "underspecified":
            return angle_term
        rest = (
            tolerance(np.abs(x[..., 0]), 0.0, r["pos_margin"])
            * tolerance(np.hypot(x[..., 2], x[..., 3]), 0.0, vel_m)
        )
        return angle_term * rest * _control_factor(spec, u)
    tip = fingertip(spec, x)
    tip_target = fingertip(spec, np.array([c["q1_target"], c["q2_target"], 0.0, 0.0]))
    if spec.reward_variant == "underspecified":
        return tolerance(np.linalg.norm(tip - tip_target, axis=-1), 0.0, r["pos_margin"])
    d = np.hypot(_chord(x[..., 0], c["q1_target"]), _chord(x[..., 1], c["q2_target"]))
    vel = np.hypot(x[..., 2], x[..., 3])
    return tolerance(d, ang_b, ang_m) * tolerance(vel, 0.0, vel_m) * _control_factor(spec, u)


def fingertip(spec: EnvSpec, x: np.ndarray) -> np.ndarray:
    c = spec.constants
    q1, q2 = x[..., 0], x[..., 1]
    px = c["l1"] * np.cos(q1) + c["l2"] * np.cos(q1 + q2)
    py = c["l1"] * np.sin(q1) + c["l2"] * np.sin(q1 + q2)
    return np.stack([px, py], axis=-1)


def target_state(spec: EnvSpec) -> np.ndarray:
    """The configuration at which the full reward equals 1 (with zero action)."""
    if spec.env_id == "reacher":
        c = spec.constants
        return np.array([c["q1_target"], c["q2_target"], 0.0, 0.0])
    return np.zeros(spec.state_dim)


def energy(spec: EnvSpec, x: np.ndarray) -> np.ndarray:
    """Mechanical energy of the pendulum (upright potential maximum)."""
    if spec.env_id != "pendulum":
        raise NotImplementedError("energy is only provided for the pendulum")
    c = spec.constants
    return 0.5 * c["m"] * c["l"] ** 2 * x[..., 1] ** 2 + c["m"] * c["g"] * c["l"] * np.cos(x[..., 0])


def with_variant(spec: EnvSpec, variant: str) -> EnvSpec:
    return replace(spec, reward_variant=variant)
