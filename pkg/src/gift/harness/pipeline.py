"""Three-stage pipeline (pre-train, build the stabilising task, fine-tune) with evaluation.

Each seed writes into ``<out>/seed_<s>/``; the pooled report lands in ``<out>/``.
Every stage draws from its own generator seeded by ``(seed, stage)``, so resuming
from a checkpoint reproduces an uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gift import env as envlib
from gift.harness.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from gift.harness.config import ExperimentConfig
from gift.harness.stats import bootstrap_ci, iqm
from gift.policy import PolicyParams, init_policy, init_value
from gift.smdp import (
    ReferenceTrajectory,
    generate_reference,
    gift_finetune,
    load_reference,
    make_smdp,
    rollout_deterministic,
    save_reference,
)
from gift.stability import (
    ClosedLoopMap,
    MleEstimate,
    PerturbationFan,
    mle_batch_vectorized,
    perturbation_fan,
    write_fan_csv,
    write_mle_csv,
)
from gift.trainer import train

log = logging.getLogger(__name__)

PHASES = ("pretrained", "gifted")
REPORT_HEADER = (
    "environment", "phase", "iqm_reward", "reward_ci_low", "reward_ci_high",
    "iqm_mle", "mle_ci_low", "mle_ci_high", "episodes", "seeds",
)
_STAGE = dict(init=0, pretrain=1, reference=2, finetune=3, evaluate=4, fan=5, bootstrap=6)


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase!r} failed: {cause}")
        self.phase = phase
        self.cause = cause


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STAGE[stage]])


def seed_dir(out: str | Path, seed: int) -> Path:
    d = Path(out) / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


@dataclass
class PhaseResult:
    seed: int
    phase: str
    rewards: np.ndarray
    mles: list[MleEstimate]
    fan: PerturbationFan | None = None

    @property
    def mle_values(self) -> np.ndarray:
        lam = np.array([e.lam for e in self.mles])
        return lam[np.isfinite(lam)]


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    per_seed: list[dict] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in REPORT_HEADER])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dict(rows=self.rows, per_seed=self.per_seed), sort_keys=True, indent=1) + "\n")

    def row(self, phase: str) -> dict:
        return next(r for r in self.rows if r["phase"] == phase)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _ckpt_path(out: Path, phase: str) -> Path:
    return out / f"checkpoint_{phase}.ckpt"


def stage_pretrain(cfg: ExperimentConfig, seed: int, resume: bool = False) -> Checkpoint:
    out = seed_dir(cfg.out_dir, seed)
    path = _ckpt_path(out, "pretrained")
    if resume and path.exists():
        log.info("seed %d: resuming from %s", seed, path)
        return load_checkpoint(path, "pretrained")
    spec = cfg.env.spec()
    init_rng = stage_rng(seed, "init")
    policy = init_policy(
        spec.obs_dim, spec.action_dim, spec.action_bound, init_rng, cfg.policy.hidden, cfg.policy.init_log_std
    )
    value = init_value(spec.obs_dim, init_rng, cfg.policy.hidden)
    policy, value, report = train(spec, policy, value, cfg.pretrain, stage_rng(seed, "pretrain"))
    report.write_csv(out / "train_pretrained.csv")
    ck = Checkpoint(policy, value, "pretrained", cfg.to_dict())
    save_checkpoint(ck, path)
    return ck


def stage_reference(
    cfg: ExperimentConfig, seed: int, pretrained: Checkpoint, resume: bool = False
) -> ReferenceTrajectory:
    out = seed_dir(cfg.out_dir, seed)
    path = out / "reference.traj"
    if resume and path.exists():
        return load_reference(path)
    ref = generate_reference(
        cfg.env.spec(), pretrained.policy, cfg.reference.n_rollouts, cfg.reference.length,
        stage_rng(seed, "reference"), seed=seed, kappa=cfg.gift.kappa,
    )
    save_reference(ref, path)
    return ref


def stage_finetune(
    cfg: ExperimentConfig, seed: int, pretrained: Checkpoint, ref: ReferenceTrajectory, resume: bool = False
) -> Checkpoint:
    out = seed_dir(cfg.out_dir, seed)
    path = _ckpt_path(out, "gifted")
    if resume and path.exists():
        return load_checkpoint(path, "gifted")
    smdp = make_smdp(cfg.env.spec(), ref, cfg.gift, pretrained.policy.obs_norm)
    policy, value, report = gift_finetune(
        smdp, pretrained.policy, pretrained.value, cfg.finetune, stage_rng(seed, "finetune")
    )
    report.write_csv(out / "train_gifted.csv")
    ck = Checkpoint(policy, value, "gifted", cfg.to_dict())
    save_checkpoint(ck, path)
    return ck


def evaluate(
    spec: envlib.EnvSpec,
    policy: PolicyParams,
    episodes: int,
    length: int,
    mle_steps: int,
    mle_transient: int,
    mle_eps: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[MleEstimate], np.ndarray]:
    """Deterministic-policy rollouts from fresh initial states.

    Returns (total task reward per episode, one MLE estimate per initial state,
    the initial states). A diverging episode keeps its reward-to-date.
    """
    x0 = envlib.reset(spec, rng, episodes)
    _, _, totals, _ = rollout_deterministic(spec, policy, x0, length)
    mles = mle_batch_vectorized(ClosedLoopMap.from_policy(spec, policy), x0, mle_steps, mle_transient, mle_eps)
    return totals, mles, x0


def evaluate_phase(cfg: ExperimentConfig, seed: int, ck: Checkpoint, phase: str) -> PhaseResult:
    out = seed_dir(cfg.out_dir, seed)
    ev = cfg.evaluation
    spec = cfg.env.spec()
    # the same initial states for both phases of a seed
    rewards, mles, x0 = evaluate(
        spec, ck.policy, ev.episodes, ev.length, ev.mle_steps, ev.mle_transient, ev.mle_eps,
        stage_rng(seed, "evaluate"),
    )
    fan = perturbation_fan(
        ClosedLoopMap.from_policy(spec, ck.policy), x0[0], ev.fan_delta, ev.fan_trajectories,
        ev.fan_horizon, stage_rng(seed, "fan"),
    )
    write_rewards_csv(rewards, out / f"eval_{phase}.csv")
    write_mle_csv(mles, out / f"mle_{phase}.csv")
    write_fan_csv(fan, out / f"fan_{phase}.csv")
    return PhaseResult(seed, phase, rewards, mles, fan)


def write_rewards_csv(rewards: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("episode_index", "total_reward"))
        for i, r in enumerate(rewards):
            w.writerow((i, repr(float(r))))


def read_phase_outputs(cfg: ExperimentConfig, seed: int, phase: str) -> PhaseResult:
    """Rebuild a PhaseResult from the CSV files an earlier evaluation wrote."""
    out = Path(cfg.out_dir) / f"seed_{seed}"
    with open(out / f"eval_{phase}.csv") as fh:
        rewards = np.array([float(r["total_reward"]) for r in csv.DictReader(fh)])
    with open(out / f"mle_{phase}.csv") as fh:
        mles = [
            MleEstimate(float(r["lambda"]), int(r["steps"]), int(r["transient"]), r["method"],
                        np.array([]), float(r["epsilon"]))
            for r in csv.DictReader(fh)
        ]
    fan = None
    fan_path = out / f"fan_{phase}.csv"
    if fan_path.exists():
        with open(fan_path) as fh:
            rows = [(int(r["trajectory_id"]), int(r["step"]), float(r["divergence_norm"])) for r in csv.DictReader(fh)]
        P = max(r[0] for r in rows) + 1
        H = max(r[1] for r in rows) + 1
        div = np.zeros((P, H))
        for p, t, d in rows:
            div[p, t] = d
        fan = PerturbationFan(np.zeros((H, 0)), np.zeros((P, H, 0)), cfg.evaluation.fan_delta, div)
    return PhaseResult(seed, phase, rewards, mles, fan)


def build_report(cfg: ExperimentConfig, results: list[PhaseResult]) -> MetricsReport:
    """Pool samples over seeds per phase, then IQM and percentile-bootstrap CI."""
    ev = cfg.evaluation
    report = MetricsReport()
    seeds = sorted({r.seed for r in results})
    for phase in PHASES:
        rs = [r for r in results if r.phase == phase]
        if not rs:
            continue
        rewards = np.concatenate([r.rewards for r in rs])
        mles = np.concatenate([r.mle_values for r in rs])
        rng = stage_rng(seeds[0], "bootstrap")
        r_lo, r_hi = bootstrap_ci(rewards, iqm, ev.bootstrap_resamples, ev.ci_level, rng)
        m_lo, m_hi = bootstrap_ci(mles, iqm, ev.bootstrap_resamples, ev.ci_level, rng)
        report.rows.append(dict(
            environment=f"{cfg.env.id}-{cfg.env.reward_variant}", phase=phase,
            iqm_reward=iqm(rewards), reward_ci_low=r_lo, reward_ci_high=r_hi,
            iqm_mle=iqm(mles), mle_ci_low=m_lo, mle_ci_high=m_hi,
            episodes=int(rewards.size), seeds=";".join(str(s) for s in seeds),
        ))
        for r in rs:
            report.per_seed.append(dict(
                seed=r.seed, phase=phase,
                iqm_reward=iqm(r.rewards) if r.rewards.size >= 4 else float(np.mean(r.rewards)),
                iqm_mle=iqm(r.mle_values) if r.mle_values.size >= 4 else float(np.mean(r.mle_values)),
                median_mle=float(np.median(r.mle_values)),
                mle_failures=int(len(r.mles) - r.mle_values.size),
                fan_growth=r.fan.growth() if r.fan is not None else None,
            ))
    return report


def run_seed(cfg: ExperimentConfig, seed: int, resume: bool = False) -> list[PhaseResult]:
    phase = "pretrain"
    try:
        pre = stage_pretrain(cfg, seed, resume)
        phase = "evaluate-pretrained"
        res_pre = evaluate_phase(cfg, seed, pre, "pretrained")
        phase = "generate-reference"
        ref = stage_reference(cfg, seed, pre, resume)
        phase = "finetune"
        gifted = stage_finetune(cfg, seed, pre, ref, resume)
        phase = "evaluate-gifted"
        res_post = evaluate_phase(cfg, seed, gifted, "gifted")
    except Exception as exc:
        raise PhaseError(phase, exc) from exc
    return [res_pre, res_post]


def run_pipeline(cfg: ExperimentConfig, resume: bool = False) -> MetricsReport:
    results: list[PhaseResult] = []
    for seed in cfg.seeds:
        log.info("seed %d", seed)
        results += run_seed(cfg, seed, resume)
    try:
        report = build_report(cfg, results)
        out = Path(cfg.out_dir)
        report.write_csv(out / "report.csv")
        report.write_json(out / "report.json")
    except Exception as exc:
        raise PhaseError("report", exc) from exc
    return report
