"""Command-line entry point: ``gift <subcommand> [--config F] [--seed N] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from gift.harness.checkpoint import load_checkpoint
from gift.harness.config import ConfigError, ExperimentConfig, load_config
from gift.harness import pipeline as pl
from gift.smdp import load_reference
from gift.stability import ClosedLoopMap, mle_batch_vectorized, perturbation_fan, write_fan_csv, write_mle_csv
from gift import env as envlib

EXIT_OK, EXIT_CONFIG, EXIT_PHASE = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment configuration")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    common.add_argument("--phase", choices=pl.PHASES, default="pretrained", help="which checkpoint to use")
    common.add_argument("--resume", action="store_true", help="reuse artifacts already present in --out")
    common.add_argument("--allow-phase-mismatch", action="store_true", help="load a checkpoint of the other phase")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gift", description="Stabilising fine-tuning of control policies.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("train", "pre-train a policy on the task reward"),
        ("gen-ref", "roll out the pre-trained policy and store the best trajectory"),
        ("finetune", "build the stabilising task from the reference and fine-tune"),
        ("eval", "task reward and Lyapunov exponents of a checkpoint"),
        ("mle", "Lyapunov exponents only"),
        ("fan", "perturbation fan around one initial state"),
        ("pipeline", "all stages for every seed, then the report"),
        ("report", "rebuild report.csv from existing evaluation outputs"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed])
    return cfg


def _load(cfg: ExperimentConfig, seed: int, phase: str, allow: bool):
    path = Path(cfg.out_dir) / f"seed_{seed}" / f"checkpoint_{phase}.ckpt"
    return load_checkpoint(path, phase, allow)


def _run(args, cfg: ExperimentConfig) -> None:
    cmd = args.command
    if cmd == "pipeline":
        report = pl.run_pipeline(cfg, resume=args.resume)
        for row in report.rows:
            print(f"{row['phase']:>10}  reward IQM {row['iqm_reward']:.2f} "
                  f"[{row['reward_ci_low']:.2f}, {row['reward_ci_high']:.2f}]  "
                  f"MLE IQM {row['iqm_mle']:.5f} [{row['mle_ci_low']:.5f}, {row['mle_ci_high']:.5f}]")
        return
    if cmd == "report":
        results = []
        for seed in cfg.seeds:
            for phase in pl.PHASES:
                try:
                    results.append(pl.read_phase_outputs(cfg, seed, phase))
                except FileNotFoundError:
                    continue
        if not results:
            raise pl.PhaseError("report", FileNotFoundError(f"no evaluation outputs under {cfg.out_dir}"))
        report = pl.build_report(cfg, results)
        report.write_csv(Path(cfg.out_dir) / "report.csv")
        report.write_json(Path(cfg.out_dir) / "report.json")
        return
    for seed in cfg.seeds:
        _run_stage(cmd, args, cfg, seed)


def _run_stage(cmd: str, args, cfg: ExperimentConfig, seed: int) -> None:
    phase_name = {"train": "pretrain", "gen-ref": "generate-reference", "finetune": "finetune"}.get(cmd, cmd)
    try:
        if cmd == "train":
            pl.stage_pretrain(cfg, seed, args.resume)
        elif cmd == "gen-ref":
            pl.stage_reference(cfg, seed, _load(cfg, seed, "pretrained", args.allow_phase_mismatch), args.resume)
        elif cmd == "finetune":
            pre = _load(cfg, seed, "pretrained", args.allow_phase_mismatch)
            ref_path = Path(cfg.out_dir) / f"seed_{seed}" / "reference.traj"
            ref = load_reference(ref_path) if ref_path.exists() else pl.stage_reference(cfg, seed, pre)
            pl.stage_finetune(cfg, seed, pre, ref, args.resume)
        elif cmd == "eval":
            ck = _load(cfg, seed, args.phase, args.allow_phase_mismatch)
            res = pl.evaluate_phase(cfg, seed, ck, args.phase)
            print(f"seed {seed} {args.phase}: median reward {float(_median(res.rewards)):.2f}, "
                  f"median MLE {float(_median(res.mle_values)):.5f}, fan growth {res.fan.growth():.3g}")
        elif cmd == "mle":
            ck = _load(cfg, seed, args.phase, args.allow_phase_mismatch)
            ev, spec = cfg.evaluation, cfg.env.spec()
            x0 = envlib.reset(spec, pl.stage_rng(seed, "evaluate"), ev.episodes)
            mles = mle_batch_vectorized(ClosedLoopMap.from_policy(spec, ck.policy), x0, ev.mle_steps, ev.mle_transient, ev.mle_eps)
            write_mle_csv(mles, pl.seed_dir(cfg.out_dir, seed) / f"mle_{args.phase}.csv")
        elif cmd == "fan":
            ck = _load(cfg, seed, args.phase, args.allow_phase_mismatch)
            ev, spec = cfg.evaluation, cfg.env.spec()
            x0 = envlib.reset(spec, pl.stage_rng(seed, "evaluate"), ev.episodes)
            fan = perturbation_fan(ClosedLoopMap.from_policy(spec, ck.policy), x0[0], ev.fan_delta,
                                   ev.fan_trajectories, ev.fan_horizon, pl.stage_rng(seed, "fan"))
            write_fan_csv(fan, pl.seed_dir(cfg.out_dir, seed) / f"fan_{args.phase}.csv")
            print(f"seed {seed} {args.phase}: fan growth {fan.growth():.3g}")
    except pl.PhaseError:
        raise
    except Exception as exc:
        raise pl.PhaseError(phase_name, exc) from exc


def _median(x) -> float:
    return float(np.median(x)) if len(x) else float("nan")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        _run(args, cfg)
    except pl.PhaseError as exc:
        print(f"phase failed: {exc.phase}: {exc.cause}", file=sys.stderr)
        return EXIT_PHASE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
