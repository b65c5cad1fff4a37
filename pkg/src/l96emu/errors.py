"""Exception hierarchy shared by all pipeline stages."""


class L96EmuError(Exception):
    """Base class for all toolkit errors."""


class ContractViolation(L96EmuError):
    """An argument violates a documented precondition."""


class IntegrationError(L96EmuError):
    """Time integration produced a non-finite state (blow-up)."""


class InterpolationError(L96EmuError):
    """A grid point cannot be interpolated (too few observations)."""


class DegenerateEnsembleError(L96EmuError):
    """Ensemble has zero spread in an observed direction."""


class AnalysisError(L96EmuError):
    """The EnKF-N inner minimization failed."""


class TrainingDivergedError(L96EmuError):
    """The training loss became non-finite."""


class FilterDivergedError(L96EmuError):
    """The assimilation run drifted beyond the climatological spread."""


class FileFormatError(L96EmuError):
    """An artifact file has an unexpected header or is truncated."""


class ConfigError(L96EmuError):
    """Experiment configuration is invalid or contains unknown keys."""
