"""Twin-experiment toolkit: emulate hidden Lorenz-96 dynamics from sparse,
noisy observations by alternating EnKF-N assimilation with training of a
residual convolutional surrogate, and evaluate the surrogate on forecast
skill and long-term dynamical consistency."""

from .model import ModelParams, Trajectory, generate_truth, l96_tendency, rk4_step, tangent_step
from .observations import ObservationSeries, apply_H, sample_observations
from .interpolation import InterpolatedField, cubic_interpolate
from .network import Architecture, NetworkParameters, forward, init_parameters, param_count
from .filtering import AnalysisSeries, Ensemble, FilterConfig, analysis_enkfn, run_filter
from .hybrid import HybridConfig, CycleRecord, initialize_weights, run_cycle, run_hybrid
from .diagnostics import (
    LyapunovSpectrum,
    PowerSpectrum,
    lyapunov_spectrum,
    mean_state,
    rmse_a,
    rmse_f,
    rmse_lyapunov,
    welch_psd,
)

from .config import ExperimentConfig, default_config, load_config
from .experiment import ExperimentReport, emit_plot_data, run_experiment, run_sweep

__version__ = "0.1.0"
