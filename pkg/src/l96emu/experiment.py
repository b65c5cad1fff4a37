"""End-to-end experiment driver.

Runs generate-truth, observe, interp, init, hybrid and evaluate as named
stages, persisting every intermediate artifact so each metric in the final
report can be recomputed from files alone.  Also provides axis sweeps and
plot-data exports."""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as artifact_io
from .config import ExperimentConfig, dump_config
from .diagnostics import (
    forecast_initial_conditions,
    free_run,
    leading_lyapunov,
    lyapunov_spectrum,
    mean_state,
    rmse_f,
    rmse_lyapunov,
    surrogate_tangent_map,
    true_tangent_map,
    welch_psd,
)
from .errors import IntegrationError, L96EmuError
from .filtering import FilterConfig, initial_ensemble, run_filter
from .hybrid import CycleRecord, run_hybrid
from .interpolation import cubic_interpolate
from .model import default_initial_state, generate_truth, resolvent
from .network import NetworkParameters, infer_step
from .observations import sample_observations

WORKERS_ENV = "L96EMU_WORKERS"

SWEEP_AXES = ("sigma_obs", "density", "K", "sigma_m")


@dataclass
class ExperimentReport:
    config_hash: str
    metrics: dict[str, float]
    provenance: dict[str, str]
    history: list[CycleRecord] = field(default_factory=list)
    created: str = ""

    def to_json(self) -> str:
        payload = {
            "config_hash": self.config_hash,
            "metrics": self.metrics,
            "provenance": self.provenance,
            "history": [dataclasses.asdict(r) for r in self.history],
            "created": self.created,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def save_report(report: ExperimentReport, path: Path) -> None:
    Path(path).write_text(report.to_json() + "\n")


def load_report(path: Path) -> ExperimentReport:
    payload = json.loads(Path(path).read_text())
    return ExperimentReport(
        config_hash=payload["config_hash"],
        metrics=payload["metrics"],
        provenance=payload["provenance"],
        history=[CycleRecord(**r) for r in payload["history"]],
        created=payload.get("created", ""),
    )


class _Stage:
    """Names the failing stage while keeping the original error chained."""

    def __init__(self, name: str, outdir: Path):
        self.name = name
        self.outdir = outdir

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            return False
        (self.outdir / "FAILED").write_text(f"{self.name}: {exc}\n")
        raise L96EmuError(f"stage {self.name} failed: {exc}") from exc


def _interp_rmse(interp_states: np.ndarray, truth_states: np.ndarray) -> float:
    # interpolation row j corresponds to time index j + 1
    diff = interp_states - truth_states[1 : interp_states.shape[0] + 1]
    return float(np.sqrt(np.mean(diff ** 2)))


def run_experiment(
    cfg: ExperimentConfig, output_dir: str | Path | None = None
) -> ExperimentReport:
    """Execute the full pipeline and write all artifacts plus report.json.

    With cycles = 0 the run stops after interpolation and reports the
    interpolation baseline only.
    """
    outdir = Path(output_dir if output_dir is not None else cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, outdir / "config.ini")
    marker = outdir / "FAILED"
    if marker.exists():
        marker.unlink()

    p = cfg.model_params()
    arch = cfg.architecture()
    metrics: dict[str, float] = {}
    provenance: dict[str, str] = {}

    with _Stage("generate-truth", outdir):
        truth_path = outdir / "truth.bin"
        if truth_path.exists():
            truth = artifact_io.load_trajectory(truth_path)
            if truth.n_steps != cfg.K or truth.m != cfg.m:
                raise L96EmuError(f"{truth_path} does not match the configuration")
        else:
            x0 = default_initial_state(p, seed=cfg.obs_seed)
            truth = generate_truth(x0, K=cfg.K, p=p, spinup=cfg.spinup)
            artifact_io.save_trajectory(truth, truth_path)

    with _Stage("observe", outdir):
        obs = sample_observations(truth, cfg.p, cfg.sigma_obs, seed=cfg.obs_seed)
        artifact_io.save_observations(obs, outdir / "observations.bin")

    with _Stage("interp", outdir):
        interp = cubic_interpolate(obs, cfg.m, cfg.K, method=cfg.interp_method)
        artifact_io.save_interpolated(
            interp, outdir / "interp.bin", outdir / "interp_mask.bin", cfg.h
        )
        metrics["interp_rmse"] = _interp_rmse(interp.states, truth.states)
        provenance["interp_rmse"] = "interp.bin"

    if cfg.cycles == 0:
        report = ExperimentReport(
            config_hash=cfg.config_hash(),
            metrics=metrics,
            provenance=provenance,
            created=time.strftime("%Y-%m-%dT%H:%M:%S"),
        )
        save_report(report, outdir / "report.json")
        return report

    with _Stage("hybrid", outdir):
        hybrid_dir = outdir / "hybrid"
        best_params, history = run_hybrid(
            obs,
            cfg.hybrid_config(),
            truth=truth,
            model_params=p,
            arch=arch,
            workdir=hybrid_dir,
            interp=interp,
        )
        artifact_io.save_weights(best_params, outdir / "best_weights.bin")
        finite = [r for r in history if np.isfinite(r.rmse_f)]
        if finite:
            best = min(finite, key=lambda r: r.rmse_f)
            metrics["best_cycle"] = float(best.cycle)
            metrics["rmse_a_best_cycle"] = best.rmse_a
            provenance["rmse_a_best_cycle"] = f"hybrid/analysis_cycle{best.cycle:03d}.bin"
        provenance["best_cycle"] = "hybrid/history.csv"

    with _Stage("evaluate", outdir):
        _evaluate(cfg, p, truth, best_params, outdir, metrics, provenance)

    report = ExperimentReport(
        config_hash=cfg.config_hash(),
        metrics=metrics,
        provenance=provenance,
        history=history,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    save_report(report, outdir / "report.json")
    return report


def _evaluate(
    cfg: ExperimentConfig,
    p,
    truth,
    params: NetworkParameters,
    outdir: Path,
    metrics: dict[str, float],
    provenance: dict[str, str],
) -> None:
    surrogate = infer_step(params)
    true_step = resolvent(p)

    ics = forecast_initial_conditions(
        p, count=cfg.ic_count, stride=cfg.ic_stride, seed=cfg.eval_seed
    )
    # An unstable surrogate can blow up within the evaluation horizon; the
    # long-run metrics then degrade to NaN instead of failing the stage.
    try:
        curve, spread = rmse_f(surrogate, true_step, ics, max_lead=cfg.max_lead)
    except IntegrationError:
        curve, spread = rmse_f(surrogate, true_step, ics, max_lead=1)
    leads = np.arange(1, curve.size + 1)
    np.savetxt(
        outdir / "rmse_f_curve.csv",
        np.column_stack([leads, curve, spread]),
        delimiter=",",
        header="lead,rmse,std",
        comments="",
        fmt="%.17g",
    )
    metrics["rmse_f_at_h"] = float(curve[0])
    provenance["rmse_f_at_h"] = "rmse_f_curve.csv"

    x_attr = truth.states[-1]
    try:
        metrics["lambda1_surrogate"] = leading_lyapunov(
            surrogate_tangent_map(params, cfg.h),
            x_attr,
            n_steps=cfg.lyapunov_steps,
            seed=cfg.eval_seed,
        )
    except IntegrationError:
        metrics["lambda1_surrogate"] = float("nan")
    provenance["lambda1_surrogate"] = "best_weights.bin"

    try:
        surr_spec = lyapunov_spectrum(
            surrogate_tangent_map(params, cfg.h),
            x_attr,
            n_steps=cfg.lyapunov_steps,
            n_exponents=min(12, cfg.m),
            seed=cfg.eval_seed,
        )
    except IntegrationError:
        surr_spec = None
    if surr_spec is not None:
        true_spec = lyapunov_spectrum(
            true_tangent_map(p),
            x_attr,
            n_steps=cfg.lyapunov_steps,
            n_exponents=min(12, cfg.m),
            seed=cfg.eval_seed,
        )
        np.savetxt(
            outdir / "lyapunov.csv",
            np.column_stack(
                [np.arange(1, 13), true_spec.exponents, surr_spec.exponents]
            ),
            delimiter=",",
            header="rank,truth,surrogate",
            comments="",
            fmt="%.17g",
        )
        metrics["rmse_lyapunov"] = rmse_lyapunov(true_spec, surr_spec)
        provenance["rmse_lyapunov"] = "lyapunov.csv"
    else:
        metrics["rmse_lyapunov"] = float("nan")

    run_len = min(cfg.psd_steps, cfg.K)
    metrics["mean_state_truth"] = mean_state(truth.states[: run_len + 1])
    provenance["mean_state_truth"] = "truth.bin"
    try:
        surr_run = free_run(surrogate, truth.states[0], run_len)
    except IntegrationError:
        surr_run = None
    if surr_run is not None:
        metrics["mean_state_surrogate"] = mean_state(surr_run)
        provenance["mean_state_surrogate"] = "psd.csv"
        fs = 1.0 / cfg.h
        psd_truth = welch_psd(
            truth.states[: run_len + 1, 0], fs, cfg.psd_seg_len, cfg.psd_overlap
        )
        psd_surr = welch_psd(surr_run[:, 0], fs, cfg.psd_seg_len, cfg.psd_overlap)
        np.savetxt(
            outdir / "psd.csv",
            np.column_stack(
                [psd_truth.frequencies, psd_truth.densities, psd_surr.densities]
            ),
            delimiter=",",
            header="frequency,truth,surrogate",
            comments="",
            fmt="%.17g",
        )
        provenance["psd"] = "psd.csv"
    else:
        metrics["mean_state_surrogate"] = float("nan")

    # Reference row: the same filter run with the true model.  The additive
    # model noise compensates surrogate imperfection, so the perfect-model
    # run uses none.
    ens_rng = np.random.default_rng(np.random.SeedSequence((cfg.filter_seed, 99)))
    ens = initial_ensemble(truth.states[0], cfg.N, ens_rng)
    obs = artifact_io.load_observations(outdir / "observations.bin")
    perfect_cfg = FilterConfig(N=cfg.N, sigma_m=0.0, seed=cfg.filter_seed)
    analysis = run_filter(true_step, obs, perfect_cfg, ens)
    artifact_io.save_analysis(
        analysis, outdir / "analysis_true_model.bin",
        N=cfg.N, sigma_m=cfg.sigma_m, seed=cfg.filter_seed,
    )
    from .diagnostics import rmse_a

    metrics["rmse_a_true_model"] = rmse_a(analysis, truth)
    provenance["rmse_a_true_model"] = "analysis_true_model.bin"


# --- sweeps -------------------------------------------------------------


def _sweep_point_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "sigma_obs":
        return cfg.with_updates(sigma_obs=float(value))
    if axis == "density":
        frac = float(value)
        if not 0 < frac <= 1:
            raise L96EmuError(f"density {frac} outside (0, 1]")
        return cfg.with_updates(p=max(1, round(frac * cfg.m)))
    if axis == "K":
        return cfg.with_updates(K=int(value))
    if axis == "sigma_m":
        return cfg.with_updates(sigma_m=float(value))
    raise L96EmuError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _run_point(args) -> tuple[str, str]:
    cfg, outdir = args
    try:
        run_experiment(cfg, outdir)
        return str(outdir), "ok"
    except L96EmuError as exc:
        return str(outdir), str(exc)


def run_sweep(
    base: ExperimentConfig,
    axis: str,
    values,
    output_dir: str | Path,
) -> list[ExperimentReport | None]:
    """One experiment per value, all other settings and seeds shared.

    Failed points are recorded in the combined CSV and the sweep continues.
    Points run in separate processes when the worker-count environment
    variable requests more than one.
    """
    outdir = Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for value in values:
        point_cfg = _sweep_point_config(base, axis, value)
        jobs.append((point_cfg, outdir / f"{axis}_{value}"))

    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            statuses = list(pool.map(_run_point, jobs))
    else:
        statuses = [_run_point(job) for job in jobs]

    reports: list[ExperimentReport | None] = []
    rows = []
    for value, (point_dir, status) in zip(values, statuses):
        report_path = Path(point_dir) / "report.json"
        if status == "ok" and report_path.exists():
            report = load_report(report_path)
            reports.append(report)
            rows.append(
                [
                    axis,
                    value,
                    report.metrics.get("rmse_f_at_h", float("nan")),
                    report.metrics.get("lambda1_surrogate", float("nan")),
                    report.metrics.get("rmse_a_best_cycle", float("nan")),
                    "ok",
                ]
            )
        else:
            reports.append(None)
            rows.append([axis, value, "", "", "", status])

    import csv

    with (outdir / "sweep.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["axis", "value", "rmse_f_at_h", "lambda1", "rmse_a", "status"])
        writer.writerows(rows)
    return reports


# --- plot data ----------------------------------------------------------


def emit_plot_data(run_dir: str | Path, hovmoller_steps: int = 100) -> list[Path]:
    """Write plotting CSVs for a completed run into run_dir/plots.

    Emits the per-cycle convergence curve, copies of the PSD, Lyapunov and
    forecast-error tables, and truth/surrogate/difference space-time grids
    from a shared initial condition.
    """
    run_dir = Path(run_dir)
    plots = run_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise L96EmuError(f"missing artifact: {report_path}")
    report = load_report(report_path)

    if report.history:
        import csv

        conv = plots / "convergence.csv"
        with conv.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["cycle", "rmse_f", "lambda1"])
            for rec in report.history:
                writer.writerow([rec.cycle, rec.rmse_f, rec.lambda1])
        written.append(conv)

    for name in ("psd.csv", "lyapunov.csv", "rmse_f_curve.csv"):
        src = run_dir / name
        if src.exists():
            dst = plots / name
            dst.write_text(src.read_text())
            written.append(dst)

    truth_path = run_dir / "truth.bin"
    weights_path = run_dir / "best_weights.bin"
    if truth_path.exists() and weights_path.exists():
        truth = artifact_io.load_trajectory(truth_path)
        params = artifact_io.load_weights(weights_path)
        n = min(hovmoller_steps, truth.n_steps)
        surr = free_run(infer_step(params), truth.states[0], n)
        grids = {
            "hovmoller_truth.csv": truth.states[: n + 1],
            "hovmoller_surrogate.csv": surr,
            "hovmoller_diff.csv": surr - truth.states[: n + 1],
        }
        for name, grid in grids.items():
            path = plots / name
            np.savetxt(path, grid, delimiter=",", fmt="%.17g")
            written.append(path)
    return written
