"""Experiment configuration: a flat INI file with sections mirroring the
pipeline stages, parsed strictly (unknown sections or keys are rejected) and
validated eagerly so bad values fail before any computation starts."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, ContractViolation
from .filtering import FilterConfig
from .hybrid import HybridConfig
from .model import ModelParams
from .network import Architecture

PROFILES = ("reference", "ci")

# Scaled-down profile for quick end-to-end runs; everything else matches the
# reference profile.
CI_OVERRIDES = {
    "K": 4000,
    "cycles": 10,
    "epochs_per_cycle": 5,
    "lyapunov_steps": 20_000,
}


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    m: int = 40
    F: float = 8.0
    h: float = 0.05
    K: int = 40_000
    spinup: int = 1000
    # observations
    p: int = 20
    sigma_obs: float = 1.0
    interp_method: str = "spacetime"
    obs_seed: int = 1
    # filter
    N: int = 30
    sigma_m: float = 0.1
    filter_seed: int = 2
    # network
    branch_channels: int = 24
    branch_kernel: int = 5
    mix_channels: int = 37
    mix_kernel: int = 5
    lr: float = 0.01
    batch_size: int = 256
    # hybrid
    cycles: int = 50
    epochs_per_cycle: int = 20
    n_lead: int = 1
    init_epochs: int = 40
    init_n_lead: int = 4
    init_spread: float = 1.0
    patience: int | None = None
    hybrid_seed: int = 4
    # evaluation
    ic_count: int = 500
    ic_stride: int = 20
    max_lead: int = 144
    lyapunov_steps: int = 100_000
    psd_steps: int = 16_000
    psd_seg_len: int = 512
    psd_overlap: float = 0.5
    eval_seed: int = 5
    # output
    output_dir: str = "out"

    def __post_init__(self) -> None:
        try:
            self.model_params()
            self.architecture()
            self.filter_config()
            if self.cycles > 0:
                self.hybrid_config()
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from exc
        if not 1 <= self.p <= self.m:
            raise ConfigError(f"p={self.p} outside 1..{self.m}")
        if self.sigma_obs < 0:
            raise ConfigError("sigma_obs must be >= 0")
        if self.K < 1 or self.spinup < 0:
            raise ConfigError("K must be >= 1 and spinup >= 0")
        if self.cycles < 0:
            raise ConfigError("cycles must be >= 0")
        for name in ("ic_count", "ic_stride", "max_lead", "psd_steps", "psd_seg_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.psd_overlap < 1:
            raise ConfigError("psd_overlap must be in [0, 1)")
        if self.lyapunov_steps < 2:
            raise ConfigError("lyapunov_steps must be >= 2")
        from .interpolation import METHODS

        if self.interp_method not in METHODS:
            raise ConfigError(
                f"interp_method {self.interp_method!r} not one of {METHODS}"
            )

    # --- domain-object views --------------------------------------------

    def model_params(self) -> ModelParams:
        return ModelParams(m=self.m, F=self.F, h=self.h)

    def architecture(self) -> Architecture:
        return Architecture(
            m=self.m,
            branch_channels=self.branch_channels,
            branch_kernel=self.branch_kernel,
            mix_channels=self.mix_channels,
            mix_kernel=self.mix_kernel,
        )

    def filter_config(self) -> FilterConfig:
        return FilterConfig(N=self.N, sigma_m=self.sigma_m, seed=self.filter_seed)

    def hybrid_config(self) -> HybridConfig:
        return HybridConfig(
            cycles=self.cycles,
            epochs_per_cycle=self.epochs_per_cycle,
            n_lead=self.n_lead,
            init_epochs=self.init_epochs,
            init_n_lead=self.init_n_lead,
            filter=self.filter_config(),
            batch_size=self.batch_size,
            seed=self.hybrid_seed,
            lr=self.lr,
            init_spread=self.init_spread,
            patience=self.patience,
            eval_ic_count=self.ic_count,
        )

    def with_updates(self, **updates) -> "ExperimentConfig":
        valid = {f.name for f in fields(self)}
        unknown = set(updates) - valid
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return replace(self, **updates)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override every per-section seed from one master seed."""
        return replace(
            self,
            obs_seed=seed,
            filter_seed=seed + 1,
            hybrid_seed=seed + 2,
            eval_seed=seed + 3,
        )

    def config_hash(self) -> str:
        items = sorted(
            (f.name, repr(getattr(self, f.name)))
            for f in fields(self)
            if f.name != "output_dir"
        )
        return hashlib.sha256(repr(items).encode()).hexdigest()[:16]


def _parse_patience(raw: str) -> int | None:
    if raw.strip().lower() in ("", "none"):
        return None
    return int(raw)


# section -> key -> (config field, parser); "density" maps onto p below.
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "model": {
        "m": ("m", int),
        "f": ("F", float),
        "h": ("h", float),
        "k": ("K", int),
        "spinup": ("spinup", int),
    },
    "observations": {
        "p": ("p", int),
        "density": ("p", None),  # fraction of m, resolved after parsing
        "sigma_obs": ("sigma_obs", float),
        "interp_method": ("interp_method", str),
        "seed": ("obs_seed", int),
    },
    "filter": {
        "n": ("N", int),
        "sigma_m": ("sigma_m", float),
        "seed": ("filter_seed", int),
    },
    "network": {
        "branch_channels": ("branch_channels", int),
        "branch_kernel": ("branch_kernel", int),
        "mix_channels": ("mix_channels", int),
        "mix_kernel": ("mix_kernel", int),
        "lr": ("lr", float),
        "batch_size": ("batch_size", int),
    },
    "hybrid": {
        "cycles": ("cycles", int),
        "epochs_per_cycle": ("epochs_per_cycle", int),
        "n_lead": ("n_lead", int),
        "init_epochs": ("init_epochs", int),
        "init_n_lead": ("init_n_lead", int),
        "init_spread": ("init_spread", float),
        "patience": ("patience", _parse_patience),
        "seed": ("hybrid_seed", int),
    },
    "evaluation": {
        "ic_count": ("ic_count", int),
        "ic_stride": ("ic_stride", int),
        "max_lead": ("max_lead", int),
        "lyapunov_steps": ("lyapunov_steps", int),
        "psd_steps": ("psd_steps", int),
        "psd_seg_len": ("psd_seg_len", int),
        "psd_overlap": ("psd_overlap", float),
        "seed": ("eval_seed", int),
    },
    "output": {
        "directory": ("output_dir", str),
    },
}


def default_config(profile: str = "reference") -> ExperimentConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    cfg = ExperimentConfig()
    if profile == "ci":
        cfg = cfg.with_updates(**CI_OVERRIDES)
    return cfg


def load_config(path: str | Path, profile: str = "reference") -> ExperimentConfig:
    """Parse an INI file on top of the profile defaults.

    Every section and key must appear in the schema; a density fraction in
    [observations] is rounded to the nearest integer station count p and is
    mutually exclusive with an explicit p.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with path.open() as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc

    updates: dict[str, object] = {}
    density: float | None = None
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        schema = _SCHEMA[section]
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            if section == "observations" and key == "density":
                density = float(raw)
                continue
            name, parse = schema[key]
            try:
                updates[name] = parse(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{path}: bad value for {key!r} in [{section}]: {exc}"
                ) from exc

    if density is not None:
        if "p" in updates:
            raise ConfigError(f"{path}: give either p or density, not both")
        if not 0 < density <= 1:
            raise ConfigError(f"{path}: density {density} outside (0, 1]")
        m = updates.get("m", default_config(profile).m)
        updates["p"] = max(1, round(density * m))

    return default_config(profile).with_updates(**updates)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    """Write the full effective configuration back out as INI."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, schema in _SCHEMA.items():
        parser[section] = {}
        for key, (name, _parse) in schema.items():
            if key == "density":
                continue
            value = getattr(cfg, name)
            parser[section][key] = "none" if value is None else str(value)
    with Path(path).open("w") as f:
        parser.write(f)
