"""Command-line front end.

One subcommand per pipeline stage, each reading and writing the documented
artifact files so stages can run independently, plus sweep and report
commands.  Exit codes: 0 success, 1 validation failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as artifact_io
from .config import PROFILES, ExperimentConfig, default_config, dump_config, load_config
from .errors import ConfigError, ContractViolation, FileFormatError, L96EmuError
from .experiment import (
    SWEEP_AXES,
    _evaluate,
    _interp_rmse,
    emit_plot_data,
    load_report,
    run_experiment,
    run_sweep,
    save_report,
)
from .hybrid import run_hybrid
from .interpolation import cubic_interpolate
from .model import default_initial_state, generate_truth
from .observations import sample_observations

VALIDATION_ERRORS = (ConfigError, ContractViolation, FileFormatError)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l96emu",
        description="Twin-experiment surrogate-model emulation pipeline",
    )
    parser.add_argument("--config", type=Path, help="INI configuration file")
    parser.add_argument("--output", type=Path, help="output directory")
    parser.add_argument(
        "--seed", type=int, help="override every per-section seed from one value"
    )
    parser.add_argument(
        "--profile", choices=PROFILES, default="reference",
        help="base defaults the config file is layered onto",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate-truth", "observe", "interp", "init", "hybrid", "evaluate"):
        sub.add_parser(name)
    run = sub.add_parser("run", help="all stages end to end")
    del run
    sweep = sub.add_parser("sweep")
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument(
        "--values", required=True,
        help="comma-separated axis values, e.g. 0,1,2,4",
    )
    sub.add_parser("report")
    return parser


def _load(args) -> tuple[ExperimentConfig, Path]:
    if args.config is not None:
        cfg = load_config(args.config, profile=args.profile)
    else:
        cfg = default_config(args.profile)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    outdir = Path(args.output) if args.output is not None else Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    return cfg, outdir


def _require(path: Path) -> Path:
    if not path.exists():
        raise ConfigError(f"missing artifact: {path} (run the earlier stage first)")
    return path


def _cmd_generate_truth(cfg: ExperimentConfig, outdir: Path) -> None:
    p = cfg.model_params()
    truth = generate_truth(
        default_initial_state(p, seed=cfg.obs_seed), K=cfg.K, p=p, spinup=cfg.spinup
    )
    artifact_io.save_trajectory(truth, outdir / "truth.bin")
    print(f"wrote {outdir / 'truth.bin'} ({cfg.K} steps)")


def _cmd_observe(cfg: ExperimentConfig, outdir: Path) -> None:
    truth = artifact_io.load_trajectory(_require(outdir / "truth.bin"))
    obs = sample_observations(truth, cfg.p, cfg.sigma_obs, seed=cfg.obs_seed)
    artifact_io.save_observations(obs, outdir / "observations.bin")
    print(f"wrote {outdir / 'observations.bin'} (p={cfg.p}, sigma_obs={cfg.sigma_obs})")


def _cmd_interp(cfg: ExperimentConfig, outdir: Path) -> None:
    obs = artifact_io.load_observations(_require(outdir / "observations.bin"))
    interp = cubic_interpolate(obs, cfg.m, obs.K, method=cfg.interp_method)
    artifact_io.save_interpolated(
        interp, outdir / "interp.bin", outdir / "interp_mask.bin", cfg.h
    )
    line = f"wrote {outdir / 'interp.bin'}"
    truth_path = outdir / "truth.bin"
    if truth_path.exists():
        truth = artifact_io.load_trajectory(truth_path)
        line += f" (rmse vs truth: {_interp_rmse(interp.states, truth.states):.4f})"
    print(line)


def _cmd_init(cfg: ExperimentConfig, outdir: Path) -> None:
    from .hybrid import initialize_weights
    from .interpolation import InterpolatedField
    from .network import init_parameters
    from .training import OptimizerState

    obs = artifact_io.load_observations(_require(outdir / "observations.bin"))
    interp = None
    if (outdir / "interp.bin").exists() and (outdir / "interp_mask.bin").exists():
        interp = InterpolatedField(
            states=artifact_io.load_trajectory(outdir / "interp.bin").states,
            mask=artifact_io.load_mask(outdir / "interp_mask.bin"),
        )
    arch = cfg.architecture()
    hy = cfg.hybrid_config()
    opt = OptimizerState.fresh(init_parameters(arch, seed=hy.seed), lr=hy.lr)
    params = initialize_weights(obs, hy, arch=arch, interp=interp, opt=opt)
    hybrid_dir = outdir / "hybrid"
    hybrid_dir.mkdir(exist_ok=True)
    artifact_io.save_weights(params, hybrid_dir / "weights_init.bin")
    artifact_io.save_optimizer(opt, arch, hybrid_dir / "adagrad_init.bin")
    print(f"wrote {hybrid_dir / 'weights_init.bin'}")


def _cmd_hybrid(cfg: ExperimentConfig, outdir: Path) -> None:
    obs = artifact_io.load_observations(_require(outdir / "observations.bin"))
    truth = None
    if (outdir / "truth.bin").exists():
        truth = artifact_io.load_trajectory(outdir / "truth.bin")
    best, history = run_hybrid(
        obs,
        cfg.hybrid_config(),
        truth=truth,
        model_params=cfg.model_params(),
        arch=cfg.architecture(),
        workdir=outdir / "hybrid",
    )
    artifact_io.save_weights(best, outdir / "best_weights.bin")
    finite = [r.rmse_f for r in history if np.isfinite(r.rmse_f)]
    tail = f", best rmse_f={min(finite):.4f}" if finite else ""
    print(f"wrote {outdir / 'best_weights.bin'} ({len(history)} cycles{tail})")


def _cmd_evaluate(cfg: ExperimentConfig, outdir: Path) -> None:
    from .experiment import ExperimentReport
    import time

    truth = artifact_io.load_trajectory(_require(outdir / "truth.bin"))
    _require(outdir / "observations.bin")
    params = artifact_io.load_weights(
        _require(outdir / "best_weights.bin"), expected=cfg.architecture()
    )
    metrics: dict[str, float] = {}
    provenance: dict[str, str] = {}
    _evaluate(cfg, cfg.model_params(), truth, params, outdir, metrics, provenance)
    report = ExperimentReport(
        config_hash=cfg.config_hash(),
        metrics=metrics,
        provenance=provenance,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    save_report(report, outdir / "report.json")
    for name in sorted(metrics):
        print(f"{name}: {metrics[name]:.6g}")


def _cmd_sweep(cfg: ExperimentConfig, outdir: Path, axis: str, values: str) -> None:
    parsed = [float(v) if axis != "K" else int(v) for v in values.split(",")]
    reports = run_sweep(cfg, axis, parsed, outdir)
    ok = sum(r is not None for r in reports)
    print(f"wrote {outdir / 'sweep.csv'} ({ok}/{len(reports)} points succeeded)")


def _cmd_report(outdir: Path) -> None:
    report = load_report(_require(outdir / "report.json"))
    written = emit_plot_data(outdir)
    print(f"config hash: {report.config_hash}")
    for name in sorted(report.metrics):
        print(f"{name}: {report.metrics[name]:.6g}")
    for path in written:
        print(f"wrote {path}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            outdir = Path(args.output) if args.output is not None else None
            if outdir is None:
                cfg, outdir = _load(args)
            _cmd_report(outdir)
            return 0
        cfg, outdir = _load(args)
        if args.command == "generate-truth":
            _cmd_generate_truth(cfg, outdir)
        elif args.command == "observe":
            _cmd_observe(cfg, outdir)
        elif args.command == "interp":
            _cmd_interp(cfg, outdir)
        elif args.command == "init":
            _cmd_init(cfg, outdir)
        elif args.command == "hybrid":
            _cmd_hybrid(cfg, outdir)
        elif args.command == "evaluate":
            _cmd_evaluate(cfg, outdir)
        elif args.command == "run":
            report = run_experiment(cfg, outdir)
            for name in sorted(report.metrics):
                print(f"{name}: {report.metrics[name]:.6g}")
        elif args.command == "sweep":
            _cmd_sweep(cfg, outdir, args.axis, args.values)
        return 0
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except L96EmuError as exc:
        cause = exc.__cause__
        if isinstance(cause, VALIDATION_ERRORS):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
