"""Experiment driver: seeded JSON configs behind subcommands.

Exit codes: 0 success, 2 config error, 3 numerical blowup, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as pio
from .errors import ConfigurationError, IntegrationBlowup, TrainingDiverged
from .experiment import (
    ExperimentConfig,
    build_dataset,
    initial_window,
    load_preset,
    run_forecast_stage,
    run_hmc_stage,
    run_training,
    uq_sweep,
)
from .forecast import forecast_ensemble
from .network import ClosureParams, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BLOWUP = 3
EXIT_IO = 4


def _load_config(args) -> ExperimentConfig:
    if args.preset:
        cfg = load_preset(args.preset)
    else:
        cfg = ExperimentConfig.from_file(args.config)
    overrides = {}
    if getattr(args, "noise", None) is not None:
        overrides["noise"] = args.noise
    if getattr(args, "output_dir", None) is not None:
        from dataclasses import replace

        cfg = replace(cfg, output_dir=args.output_dir)
    if overrides.get("noise") is not None:
        from dataclasses import replace

        cfg = replace(cfg, observation=replace(cfg.observation,
                                               noise_fraction=overrides["noise"]))
    return cfg


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pio.write_manifest(out, cfg.to_dict(), cfg.seeds())
    return out


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _outdir(cfg)
    traj, obs = build_dataset(cfg)
    pio.write_trajectory_csv(out / "truth.csv", traj)
    pio.save_observations(out, obs)
    print(f"wrote truth trajectory ({traj.times.shape[0]} rows) and "
          f"observations ({obs.times.shape[0]} rows) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _outdir(cfg)
    if args.observations:
        obs = pio.load_observations(Path(args.observations))
    else:
        _, obs = build_dataset(cfg)
    report = run_training(obs, cfg)
    save_checkpoint(
        out / "checkpoint.json", report.final_params,
        meta={"residual_variance": report.residual_variance,
              "variant": cfg.closure.variant, "seed": cfg.train.seed},
    )
    pio.write_loss_curve_csv(out / "loss_curve.csv", report.loss_curve)
    print(f"final loss {report.loss_curve[-1]:.6g}, "
          f"residual variance {report.residual_variance:.6g}")
    return EXIT_OK


def cmd_hmc(args) -> int:
    cfg = _load_config(args)
    out = _outdir(cfg)
    if args.observations:
        obs = pio.load_observations(Path(args.observations))
    else:
        _, obs = build_dataset(cfg)
    params, meta = load_checkpoint(args.checkpoint)
    from .training import TrainReport

    report = TrainReport(
        loss_curve=np.empty(0), final_params=params,
        residual_variance=float(meta["residual_variance"]),
    )
    chain = run_hmc_stage(report, obs, cfg)
    pio.save_chain(out, chain)
    print(f"chain of {len(chain)} samples, acceptance rate {chain.acceptance_rate:.3f}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    cfg = _load_config(args)
    out = _outdir(cfg)
    traj, obs = build_dataset(cfg)
    chain = pio.load_chain(Path(args.chain).parent, Path(args.chain).stem) \
        if args.chain else None
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    elif chain is not None:
        from .forecast import map_estimate

        sample = map_estimate(chain, burn_in=cfg.forecast.burn_in)
        params = ClosureParams(flat=sample.theta, arch=cfg.model.arch)
    else:
        raise ConfigurationError("forecast needs --checkpoint or --chain")

    det, ens, report, (truth_states, _) = run_forecast_stage(
        cfg, traj, obs, params, chain
    )
    pio.write_rollout_csv(out / "forecast_deterministic.csv", det.result)
    if ens is not None:
        pio.write_band_csv(out / "forecast_band.csv", ens.times, ens.mean, ens.std)
        np.save(out / "forecast_members.npy", ens.member_states)
    if report is not None:
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
        print(json.dumps(report.to_dict(), indent=2))
    if det.blowup_time is not None:
        print(f"deterministic forecast blew up at t={det.blowup_time:.4g}")
        return EXIT_BLOWUP
    return EXIT_OK


def cmd_uq_sweep(args) -> int:
    cfg = _load_config(args)
    out = _outdir(cfg)
    F_values = [float(x) for x in args.forcings.split(",")]
    noise_values = [float(x) for x in args.noises.split(",")]
    result = uq_sweep(cfg, F_values, noise_values)
    rows = ["F,noise,sigma_r"]
    for (F, noise), value in sorted(result["sigma_r"].items()):
        rows.append(f"{F:.17g},{noise:.17g},{'' if value is None else format(value, '.17g')}")
    (out / "uq_sweep.csv").write_text("\n".join(rows) + "\n")
    print("\n".join(rows))
    if result["failures"]:
        print(f"{len(result['failures'])} cells failed", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l96closure",
        description="Bayesian history-based closures for the two-scale Lorenz '96 system",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--config", help="experiment config JSON file")
        group.add_argument("--preset", choices=["full", "desk", "toy"],
                           help="shipped configuration preset")
        p.add_argument("--output-dir", help="override output directory")

    p = sub.add_parser("simulate", help="truth run + observation generation")
    common(p)
    p.add_argument("--noise", type=float, help="override observation noise fraction")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="deterministic Adam training")
    common(p)
    p.add_argument("--observations", help="directory with saved observations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("hmc", help="posterior sampling from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--observations", help="directory with saved observations")
    p.set_defaults(func=cmd_hmc)

    p = sub.add_parser("forecast", help="online forecast + metrics")
    common(p)
    p.add_argument("--checkpoint", help="deterministic parameter checkpoint")
    p.add_argument("--chain", help="chain manifest JSON path")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("uq-sweep", help="sigma_r table over forcing x noise")
    common(p)
    p.add_argument("--forcings", default="5,15")
    p.add_argument("--noises", default="0.03,0.1")
    p.set_defaults(func=cmd_uq_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, TrainingDiverged) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationBlowup as exc:
        print(f"numerical blowup: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
