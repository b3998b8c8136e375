"""Experiment configuration: typed dataclasses mapped to flat dotted keys."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..filters import CovMode
from ..flatconfig import (ConfigError, dataclass_from_flat, dataclass_to_flat, dump_flat, load_flat,
                          parse_flat)
from ..models import EmParams, Lorenz63Params, RingParams
from ..numkernel import Scheme

MODELS = ("lorenz63", "em3", "ring")
FILTERS = ("3dvar", "ekf", "enkf", "etkf", "ensrf", "letkf")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "lorenz63"
    lorenz: Lorenz63Params = field(default_factory=Lorenz63Params)
    em3: EmParams = field(default_factory=EmParams)
    ring: RingParams = field(default_factory=RingParams)

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ValueError(f"model.kind must be one of {MODELS}, got {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    scheme: Scheme = Scheme.RK4
    dt: Optional[float] = None  # None: the model's default step
    window: float = 0.25
    cycles: int = 300
    spinup: int = 100
    runs: int = 1  # independent twin runs (truth, observations and initial ensemble per run id)
    hold_windows: float = 1.0  # reversal persistence, in windows

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.cycles <= self.spinup:
            raise ValueError("cycles must exceed spinup")
        if self.spinup < 0 or self.window <= 0:
            raise ValueError("spinup must be >= 0 and window > 0")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


@dataclass(frozen=True)
class ObsConfig:
    spacing: int = 1
    indices: Optional[tuple[int, ...]] = None  # explicit list overrides spacing
    velocity: bool = False  # ring only: also observe u
    noise_sigma: Optional[float] = None  # absolute; None -> noise_frac * climatological std
    noise_frac: float = 0.01

    def __post_init__(self):
        if self.spacing < 1:
            raise ValueError("obs.spacing must be >= 1")
        if self.noise_sigma is not None and self.noise_sigma <= 0:
            raise ValueError("obs.noise_sigma must be positive")
        if self.noise_frac <= 0:
            raise ValueError("obs.noise_frac must be positive")


@dataclass(frozen=True)
class FilterConfig:
    kind: str = "etkf"
    members: int = 10
    delta: float = 1.0
    mu: float = 0.0
    rho: float = 1.0
    cov_mode: CovMode = CovMode.STANDARD
    ekf_cap_factor: float = 1e6
    ekf_p0_frac: float = 1.0  # initial EKF covariance: frac^2 * climatological variances

    def __post_init__(self):
        object.__setattr__(self, "cov_mode", CovMode(self.cov_mode))
        if self.kind not in FILTERS:
            raise ValueError(f"filter.kind must be one of {FILTERS}, got {self.kind!r}")
        if self.members < 2:
            raise ValueError("filter.members must be >= 2")


@dataclass(frozen=True)
class LocalizationConfig:
    center: int = 10
    halo: int = 15
    shift: str = "0"  # cells to slide each observation window along the local flow, or "adaptive"

    def __post_init__(self):
        if self.shift != "adaptive":
            try:
                int(self.shift)
            except ValueError:
                raise ValueError(f"localization.shift must be an integer or 'adaptive', got {self.shift!r}") from None


@dataclass(frozen=True)
class SweepConfig:
    windows: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    filters: tuple[str, ...] = ("ekf", "enkf", "etkf", "ensrf")
    grid_points: int = 16
    delta_max: float = 1.5
    mu_max: float = 1.5
    spacings: tuple[int, ...] = (1, 2, 5, 10)
    shifts: tuple[str, ...] = ("0", "2", "5", "10", "adaptive")
    alpha_em: float = 10.0  # ring parameter sweep: first-harmonic alpha and the beta values tried
    beta_em: tuple[float, ...] = (14.0, 20.0, 24.0, 28.0, 32.0, 40.0)
    span: float = 2000.0


@dataclass(frozen=True)
class DmdConfig:
    snapshot_interval: float = 10.0
    snapshot_span: float = 900.0
    state_interval: float = 1.0
    state_span: float = 2000.0
    lags: tuple[float, ...] = (10.0, 30.0, 50.0, 70.0)  # 1, 3, 5 and 7 assimilation windows
    rank_tol: float = 1e-10
    hold: float = 10.0
    pre_window: float = 10.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    dmd: DmdConfig = field(default_factory=DmdConfig)

    def with_(self, **flat) -> "ExperimentConfig":
        """Copy with flat dotted overrides, e.g. ``cfg.with_(**{"run.window": 0.5})``."""
        items = {k: _flat_str(v) for k, v in self.to_flat().items()}
        items.update({k: _flat_str(v) for k, v in flat.items()})
        return config_from_items(items)

    def to_flat(self) -> dict:
        return dataclass_to_flat(self)

    def dumps(self) -> str:
        return dump_flat(self.to_flat())


def _flat_str(v) -> str:
    from ..flatconfig import format_value

    return v if isinstance(v, str) else format_value(v)


def config_from_items(items: dict[str, str]) -> ExperimentConfig:
    return dataclass_from_flat(ExperimentConfig, items)


def loads(text: str) -> ExperimentConfig:
    return config_from_items(parse_flat(text))


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a flat key-value config, or the config recorded in a run manifest (``.json``)."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
            items = manifest["config"]
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        return config_from_items({k: str(v) for k, v in items.items()})
    return config_from_items(load_flat(path))


def preset_path(name: str) -> Path:
    """Path of a config shipped with the package (``configs/<name>.cfg``)."""
    from importlib import resources

    return Path(str(resources.files("thermosyphon_da") / "configs" / f"{name}.cfg"))


def load_preset(name: str) -> ExperimentConfig:
    return load_config(preset_path(name))


__all__ = ["ExperimentConfig", "ModelConfig", "RunConfig", "ObsConfig", "FilterConfig", "LocalizationConfig",
           "SweepConfig", "DmdConfig", "ConfigError", "load_config", "loads", "load_preset", "preset_path"]
