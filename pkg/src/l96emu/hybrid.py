"""The two-step iterative algorithm: interpolation-based weight
initialization, then alternating assimilation (with the current surrogate as
forecast model) and training (on the resulting analysis) for a fixed number
of cycles, keeping the surrogate with the best forecast skill."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import (
    forecast_initial_conditions,
    leading_lyapunov,
    rmse_a,
    rmse_f,
    surrogate_tangent_map,
)
from .errors import (
    AnalysisError,
    ContractViolation,
    DegenerateEnsembleError,
    FilterDivergedError,
    IntegrationError,
    TrainingDivergedError,
)

# Any of these during a cycle means the current surrogate cannot track the
# observations at all (blow-up, ensemble collapse, solver failure); the cycle
# is aborted and its parameter update discarded.  Statistical divergence of
# the analysis is softer: the cycle is flagged but still trains, since the
# analysis retains the observed information.
CYCLE_ABORT_ERRORS = (
    DegenerateEnsembleError,
    AnalysisError,
    IntegrationError,
    TrainingDivergedError,
)
from .filtering import AnalysisSeries, FilterConfig, initial_ensemble, run_filter
from .interpolation import InterpolatedField, cubic_interpolate
from .model import ModelParams, Trajectory, resolvent
from .network import Architecture, NetworkParameters, infer_step, init_parameters
from .training import OptimizerState, make_dataset, train

VARIANCE_FLOOR = 1e-3
# Climatological spread of the reference attractor; analyses worse than this
# carry no information.
CLIMATOLOGICAL_SPREAD = 3.6
DIVERGED_FRACTION = 0.10
MAX_CONSECUTIVE_ABORTS = 3
MONITOR_LYAPUNOV_STEPS = 4000


@dataclass(frozen=True)
class HybridConfig:
    cycles: int = 50
    epochs_per_cycle: int = 20
    n_lead: int = 1
    init_epochs: int = 40
    init_n_lead: int = 4
    filter: FilterConfig = field(default_factory=FilterConfig)
    batch_size: int = 256
    seed: int = 0
    lr: float = 0.01
    init_spread: float = 1.0
    patience: int | None = None  # optional early stop; off by default
    eval_ic_count: int = 500

    def __post_init__(self) -> None:
        if self.cycles < 1:
            raise ContractViolation("cycles must be >= 1")
        for name in ("n_lead", "init_n_lead", "init_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.epochs_per_cycle < 0:
            raise ContractViolation("epochs_per_cycle must be >= 0")


@dataclass
class CycleRecord:
    cycle: int
    rmse_f: float
    lambda1: float
    train_loss: float
    rmse_a: float
    wall_time: float
    aborted: bool = False
    diverged: bool = False

    def as_row(self) -> list:
        return [
            self.cycle, self.rmse_f, self.lambda1, self.train_loss,
            self.rmse_a, self.wall_time, int(self.aborted), int(self.diverged),
        ]

    HEADER = [
        "cycle", "rmse_f", "lambda1", "train_loss", "rmse_a", "wall_time",
        "aborted", "diverged",
    ]


def _stream_seed(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *path)))


def cycle_loss_weights(variances: np.ndarray, floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """Inverse analysis variance with a floor against near-zero variances."""
    return 1.0 / np.maximum(variances, floor)


def initialize_weights(
    obs,
    cfg: HybridConfig,
    arch: Architecture | None = None,
    interp: InterpolatedField | None = None,
    opt: OptimizerState | None = None,
) -> NetworkParameters:
    """Train a fresh network on the cubic interpolation of the observations.

    Loss weights are 1 at directly observed entries and 0 elsewhere, so
    interpolated values serve as inputs but never as targets.  A caller-owned
    ``opt`` lets the accumulated optimizer state carry into later training.
    """
    if arch is None:
        arch = Architecture()
    if interp is None:
        interp = cubic_interpolate(obs, arch.m, obs.K)
    weights = interp.mask.astype(np.float64)
    if weights.sum() == 0:
        raise ContractViolation("observation mask is empty: nothing to train on")
    params = init_parameters(arch, seed=cfg.seed)
    dataset = make_dataset(interp.states, weights, cfg.init_n_lead)
    rng = _stream_seed(cfg.seed, 0)
    if opt is None:
        opt = OptimizerState.fresh(params, lr=cfg.lr)
    train(params, dataset, cfg.init_epochs, cfg.batch_size, rng, opt=opt)
    return params


def _check_divergence(
    analysis: AnalysisSeries, obs, truth: Trajectory | None
) -> None:
    if truth is not None:
        err = np.sqrt(((analysis.means - truth.states[1:]) ** 2).mean(axis=1))
        threshold = CLIMATOLOGICAL_SPREAD
    else:
        rows = np.arange(obs.K)[:, None]
        err = np.sqrt(
            ((analysis.means[rows, obs.indices] - obs.values) ** 2).mean(axis=1)
        )
        threshold = CLIMATOLOGICAL_SPREAD + obs.sigma_obs
    frac = float((err > threshold).mean())
    if frac > DIVERGED_FRACTION:
        raise FilterDivergedError(
            f"analysis error above climatological spread for {frac:.0%} of steps"
        )


def run_cycle(
    params: NetworkParameters,
    obs,
    cfg: HybridConfig,
    cycle: int,
    init_state: np.ndarray,
    truth: Trajectory | None = None,
    model_params: ModelParams | None = None,
    eval_ics: np.ndarray | None = None,
    h: float = 0.05,
    opt: OptimizerState | None = None,
) -> tuple[NetworkParameters, AnalysisSeries, CycleRecord]:
    """One DA step with the current surrogate followed by one ML step."""
    t0 = time.perf_counter()
    ens_rng = _stream_seed(cfg.seed, cycle, 1)
    ens = initial_ensemble(init_state, cfg.filter.N, ens_rng, spread=cfg.init_spread)
    filter_cfg = FilterConfig(
        N=cfg.filter.N,
        sigma_m=cfg.filter.sigma_m,
        seed=int(_stream_seed(cfg.seed, cycle, 2).integers(2 ** 62)),
    )
    analysis = run_filter(infer_step(params), obs, filter_cfg, ens)
    diverged = False
    try:
        _check_divergence(analysis, obs, truth)
    except FilterDivergedError:
        diverged = True

    new_params = params.copy()
    loss_history: list[float] = []
    if cfg.epochs_per_cycle > 0:
        weights = cycle_loss_weights(analysis.variances)
        dataset = make_dataset(analysis.means, weights, cfg.n_lead)
        train_rng = _stream_seed(cfg.seed, cycle, 3)
        # One optimizer for the whole run: the squared-gradient accumulators
        # grow monotonically across cycles, so the effective step size keeps
        # decaying and the surrogate settles instead of refitting each cycle's
        # analysis from scratch.
        if opt is None:
            opt = OptimizerState.fresh(new_params, lr=cfg.lr)
        loss_history = train(
            new_params, dataset, cfg.epochs_per_cycle, cfg.batch_size,
            train_rng, opt=opt,
        )

    # Monitoring failures (an unstable surrogate blowing up mid-run) must not
    # discard the trained parameters, so they degrade to NaN scores instead.
    score_f = float("nan")
    if eval_ics is not None and model_params is not None:
        try:
            curve, _ = rmse_f(
                infer_step(new_params), resolvent(model_params), eval_ics, max_lead=1
            )
            score_f = float(curve[0])
        except IntegrationError:
            pass
    try:
        lam1 = leading_lyapunov(
            surrogate_tangent_map(new_params, h),
            analysis.means[-1],
            n_steps=MONITOR_LYAPUNOV_STEPS,
            seed=cfg.seed,
        )
    except IntegrationError:
        lam1 = float("nan")
    score_a = rmse_a(analysis, truth) if truth is not None else float("nan")
    record = CycleRecord(
        cycle=cycle,
        rmse_f=score_f,
        lambda1=lam1,
        train_loss=loss_history[-1] if loss_history else float("nan"),
        rmse_a=score_a,
        wall_time=time.perf_counter() - t0,
        diverged=diverged,
    )
    return new_params, analysis, record


def run_hybrid(
    obs,
    cfg: HybridConfig,
    truth: Trajectory | None = None,
    model_params: ModelParams | None = None,
    arch: Architecture | None = None,
    workdir: Path | None = None,
    interp: InterpolatedField | None = None,
) -> tuple[NetworkParameters, list[CycleRecord]]:
    """Initialize, then iterate DA/ML cycles with best-model selection.

    When the truth trajectory (and model parameters) are supplied the
    forecast RMSE is scored each cycle and the best-scoring parameters are
    returned; otherwise the final cycle's parameters are returned.  With a
    ``workdir``, per-cycle weights and analyses are checkpointed and a run
    is resumed from the last complete checkpoint.
    """
    from . import io as artifact_io

    if arch is None:
        arch = Architecture()
    if model_params is None and truth is not None:
        model_params = ModelParams(m=arch.m, h=truth.step)
    h = truth.step if truth is not None else (
        model_params.h if model_params is not None else 0.05
    )
    eval_ics = None
    if truth is not None and model_params is not None:
        eval_ics = forecast_initial_conditions(
            model_params, count=cfg.eval_ic_count, seed=cfg.seed + 1000
        )
    if truth is not None:
        init_state = truth.states[0]
    else:
        if interp is None:
            interp = cubic_interpolate(obs, arch.m, obs.K)
        init_state = interp.states[0]

    history: list[CycleRecord] = []
    start_cycle = 1
    params: NetworkParameters | None = None
    opt: OptimizerState | None = None
    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        params, opt, history, start_cycle = _resume(workdir, arch)
    if params is None:
        opt = OptimizerState.fresh(init_parameters(arch, seed=cfg.seed), lr=cfg.lr)
        params = initialize_weights(obs, cfg, arch=arch, interp=interp, opt=opt)
        if workdir is not None:
            artifact_io.save_weights(params, workdir / "weights_init.bin")
            artifact_io.save_optimizer(opt, arch, workdir / "adagrad_init.bin")

    best_params = params
    best_score = np.inf
    for rec in history:
        if np.isfinite(rec.rmse_f) and rec.rmse_f < best_score:
            best_score = rec.rmse_f
            if workdir is not None:
                best_params = artifact_io.load_weights(
                    workdir / f"weights_cycle{rec.cycle:03d}.bin", expected=arch
                )

    consecutive_aborts = 0
    for cycle in range(start_cycle, cfg.cycles + 1):
        opt_backup = opt.copy()
        try:
            params, analysis, record = run_cycle(
                params, obs, cfg, cycle, init_state,
                truth=truth, model_params=model_params, eval_ics=eval_ics, h=h,
                opt=opt,
            )
            consecutive_aborts = 0
        except CYCLE_ABORT_ERRORS:
            record = CycleRecord(
                cycle=cycle, rmse_f=float("nan"), lambda1=float("nan"),
                train_loss=float("nan"), rmse_a=float("nan"),
                wall_time=0.0, aborted=True,
            )
            analysis = None
            opt = opt_backup  # the aborted cycle's partial updates are discarded
            consecutive_aborts += 1
        history.append(record)
        if workdir is not None:
            artifact_io.save_weights(params, workdir / f"weights_cycle{cycle:03d}.bin")
            artifact_io.save_optimizer(opt, arch, workdir / f"adagrad_cycle{cycle:03d}.bin")
            if analysis is not None:
                artifact_io.save_analysis(
                    analysis, workdir / f"analysis_cycle{cycle:03d}.bin",
                    N=cfg.filter.N, sigma_m=cfg.filter.sigma_m, seed=cfg.seed,
                )
            _append_history(workdir / "history.csv", record)
        if consecutive_aborts >= MAX_CONSECUTIVE_ABORTS:
            raise FilterDivergedError(
                f"{MAX_CONSECUTIVE_ABORTS} consecutive aborted cycles "
                f"(last at cycle {cycle}); history has {len(history)} records"
            )
        if not record.aborted and np.isfinite(record.rmse_f) and record.rmse_f < best_score:
            best_score = record.rmse_f
            best_params = params.copy()
        if cfg.patience is not None and _out_of_patience(history, cfg.patience):
            break

    if eval_ics is None:
        return params, history
    return best_params, history


def _out_of_patience(history: list[CycleRecord], patience: int) -> bool:
    scores = [r.rmse_f for r in history if np.isfinite(r.rmse_f)]
    if len(scores) <= patience:
        return False
    best_at = int(np.argmin(scores))
    return len(scores) - 1 - best_at >= patience


def _append_history(path: Path, record: CycleRecord) -> None:
    new = not path.exists()
    with path.open("a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(CycleRecord.HEADER)
        writer.writerow(record.as_row())


def _resume(
    workdir: Path, arch: Architecture
) -> tuple[NetworkParameters | None, OptimizerState | None, list[CycleRecord], int]:
    from . import io as artifact_io

    history_path = workdir / "history.csv"
    history: list[CycleRecord] = []
    if history_path.exists():
        with history_path.open() as f:
            for row in csv.DictReader(f):
                history.append(
                    CycleRecord(
                        cycle=int(row["cycle"]),
                        rmse_f=float(row["rmse_f"]),
                        lambda1=float(row["lambda1"]),
                        train_loss=float(row["train_loss"]),
                        rmse_a=float(row["rmse_a"]),
                        wall_time=float(row["wall_time"]),
                        aborted=bool(int(row["aborted"])),
                        diverged=bool(int(row.get("diverged", "0"))),
                    )
                )
    # a checkpoint is only usable when both the weights and the optimizer
    # accumulators survived; otherwise fall back to an earlier stage
    if history:
        last = history[-1].cycle
        weights_path = workdir / f"weights_cycle{last:03d}.bin"
        opt_path = workdir / f"adagrad_cycle{last:03d}.bin"
        if weights_path.exists() and opt_path.exists():
            return (
                artifact_io.load_weights(weights_path, expected=arch),
                artifact_io.load_optimizer(opt_path, expected=arch),
                history,
                last + 1,
            )
        history = []
    init_path = workdir / "weights_init.bin"
    init_opt_path = workdir / "adagrad_init.bin"
    if init_path.exists() and init_opt_path.exists():
        return (
            artifact_io.load_weights(init_path, expected=arch),
            artifact_io.load_optimizer(init_opt_path, expected=arch),
            [],
            1,
        )
    return None, None, [], 1
