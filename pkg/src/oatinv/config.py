"""Experiment configuration: JSON schema, validation and the built-in templates."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InvalidArgument
from .forward import Acquisition
from .geometry import EnvironmentSpec, ImagingGrid
from .network import NetworkConfig
from .phantoms import VesselParams
from .training import TrainConfig

KINDS = ("position", "detectors", "coverage", "soundspeed")


class ConfigError(InvalidArgument):
    """Configuration rejected; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridModel(_Model):
    nx: int = Field(64, ge=2)
    ny: int = Field(64, ge=2)
    dx: float = Field(120e-6, gt=0)
    dy: float | None = Field(None, gt=0)

    def build(self) -> ImagingGrid:
        return ImagingGrid(self.nx, self.ny, self.dx, self.dy if self.dy is not None else self.dx)


class AcquisitionModel(_Model):
    vs: float = Field(1490.0, gt=0)
    radius: float = Field(10e-3, gt=0)
    n_t: int = Field(512, ge=3)
    dt: float = Field(20e-9, gt=0)
    f_lo: float = Field(0.1e6, gt=0)
    f_hi: float = Field(15e6, gt=0)
    bandpass: bool = True

    @model_validator(mode="after")
    def _band(self):
        if self.bandpass and not self.f_lo < self.f_hi < 0.5 / self.dt:
            raise ValueError(f"need f_lo < f_hi < Nyquist ({0.5 / self.dt:g} Hz)")
        return self

    def build(self) -> Acquisition:
        return Acquisition(**self.model_dump())


class EnvironmentModel(_Model):
    label: str = ""
    n_detectors: int = Field(16, ge=1)
    coverage_deg: float = Field(360.0, gt=0, le=360)
    position_uncertainty_pct: float = Field(0.0, ge=0)
    vs_uncertainty_pct: float = Field(0.0, ge=0)
    snr_range_db: tuple[float, float] = (40.0, 60.0)

    @model_validator(mode="after")
    def _snr(self):
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ValueError("snr_range_db is reversed")
        return self

    def build(self) -> EnvironmentSpec:
        return EnvironmentSpec(**self.model_dump())


class PhantomModel(_Model):
    branches: int = Field(4, ge=2, le=8)
    thickness_px: float = Field(2.0, ge=1, le=3)
    step_px: float = Field(1.0, gt=0)
    branch_prob: float = Field(0.03, ge=0, le=1)
    curvature: float = Field(0.15, ge=0)
    max_depth: int = Field(2, ge=0)

    def build(self) -> VesselParams:
        return VesselParams(**self.model_dump())


class DataModel(_Model):
    n_base: int = Field(120, ge=1)
    augment_factor: int = Field(4, ge=1)
    split_fraction: float = Field(0.8, gt=0, le=1)
    n_test: int = Field(50, ge=1)
    phantom: PhantomModel = PhantomModel()


class TrainModel(_Model):
    epochs: int = Field(100, ge=1)
    batch_per_env: int = Field(2, ge=1)
    pooled_batch: int = Field(10, ge=1)
    lr: float = Field(5e-4, gt=0)
    patience: int = Field(10, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    def build(self, tau: float, seed: int) -> TrainConfig:
        return TrainConfig(tau=tau, seed=seed, **self.model_dump())


class NetworkModel(_Model):
    n_scales: int = Field(3, ge=1)
    base_channels: int = Field(8, ge=1)
    dense_growth_rate: int = Field(4, ge=1)
    dense_layers_per_block: int = Field(2, ge=0)

    def build(self, grid: ImagingGrid) -> NetworkConfig:
        return NetworkConfig(input_shape=grid.shape, **self.model_dump())


class ExperimentConfig(_Model):
    kind: Literal["position", "detectors", "coverage", "soundspeed", "custom"]
    seed: int = Field(0, ge=0)
    output_dir: str = "runs"
    grid: GridModel = GridModel()
    acquisition: AcquisitionModel = AcquisitionModel()
    training_envs: list[EnvironmentModel] = Field(min_length=1)
    lax: EnvironmentModel
    challenging: EnvironmentModel
    taus: list[float] = Field([0.4, 0.8], min_length=1)
    benchmark: bool = True
    train: TrainModel = TrainModel()
    network: NetworkModel = NetworkModel()
    data: DataModel = DataModel()
    workers: int = Field(1, ge=1)
    n_panels: int = Field(4, ge=0)

    @model_validator(mode="after")
    def _check(self):
        for t in self.taus:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"tau {t} outside [0, 1]")
        half = 0.5 * max(self.grid.nx * self.grid.dx, self.grid.ny * (self.grid.dy or self.grid.dx))
        if self.acquisition.radius <= half * 2**0.5:
            raise ValueError("sensor radius must clear the imaging grid")
        factor = 2 ** (self.network.n_scales - 1)
        if self.grid.nx % factor or self.grid.ny % factor:
            raise ValueError(f"grid size must be divisible by {factor} for {self.network.n_scales} scales")
        return self

    # domain objects
    def grid_obj(self) -> ImagingGrid:
        return self.grid.build()

    def acquisition_obj(self) -> Acquisition:
        return self.acquisition.build()

    def network_obj(self) -> NetworkConfig:
        return self.network.build(self.grid_obj())

    def env_specs(self) -> list[EnvironmentSpec]:
        return [e.build() for e in self.training_envs]

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _env_list(field: str, values, label_fmt: str) -> list[dict]:
    return [{field: v, "label": label_fmt.format(v)} for v in values]


_TEMPLATES = {
    "position": {
        "training_envs": _env_list("position_uncertainty_pct", [0.0001, 0.001, 0.01, 0.1, 1.0], "pos {:g}%"),
        "lax": {"position_uncertainty_pct": 0.0, "label": "lax (pos 0%)"},
        "challenging": {"position_uncertainty_pct": 1.5, "label": "challenging (pos 1.5%)"},
    },
    "detectors": {
        "training_envs": _env_list("n_detectors", [8, 16, 32, 56, 64], "{} detectors"),
        "lax": {"n_detectors": 48, "label": "lax (48 detectors)"},
        "challenging": {"n_detectors": 4, "label": "challenging (4 detectors)"},
    },
    "coverage": {
        "training_envs": _env_list("coverage_deg", [120.0, 180.0, 240.0, 300.0, 360.0], "coverage {:g} deg"),
        "lax": {"coverage_deg": 270.0, "label": "lax (270 deg)"},
        "challenging": {"coverage_deg": 60.0, "label": "challenging (60 deg)"},
    },
    "soundspeed": {
        "training_envs": _env_list("vs_uncertainty_pct", [0.01, 0.1, 0.5, 1.0, 1.5], "vs {:g}%"),
        "lax": {"vs_uncertainty_pct": 0.0, "label": "lax (vs 0%)"},
        "challenging": {"vs_uncertainty_pct": 2.0, "label": "challenging (vs 2%)"},
    },
}

# Values reported for the full-scale 128x128 setup (32 nominal detectors, 500 test
# images); the report prints them as reference targets only.
REFERENCE_VALUES = {
    "position": [
        ("lax", "andmask_tau0.8", 0.873, 0.968, 0.048, 27.375),
        ("lax", "andmask_tau0.4", 0.911, 0.981, 0.035, 30.241),
        ("lax", "benchmark", 0.892, 0.974, 0.042, 28.751),
        ("lax", "lbp", -0.125, 0.231, 0.563, 5.620),
        ("challenging", "andmask_tau0.8", 0.692, 0.851, 0.102, 20.457),
        ("challenging", "andmask_tau0.4", 0.670, 0.856, 0.113, 19.946),
        ("challenging", "benchmark", 0.664, 0.842, 0.110, 19.883),
        ("challenging", "lbp", 0.036, 0.244, 0.413, 8.001),
    ],
    "detectors": [
        ("lax", "andmask_tau0.8", 0.843, 0.965, 0.066, 24.314),
        ("lax", "andmask_tau0.4", 0.831, 0.967, 0.060, 25.053),
        ("lax", "benchmark", 0.847, 0.968, 0.064, 24.845),
        ("lax", "lbp", -0.156, 0.320, 0.537, 6.192),
        ("challenging", "andmask_tau0.8", 0.517, 0.519, 0.203, 14.111),
        ("challenging", "andmask_tau0.4", 0.489, 0.531, 0.202, 14.156),
        ("challenging", "benchmark", 0.516, 0.534, 0.202, 14.135),
        ("challenging", "lbp", 0.054, 0.222, 0.408, 8.142),
    ],
    "coverage": [
        ("lax", "andmask_tau0.8", 0.814, 0.887, 0.094, 21.039),
        ("lax", "andmask_tau0.4", 0.813, 0.895, 0.096, 20.935),
        ("lax", "benchmark", 0.815, 0.891, 0.095, 20.974),
        ("lax", "lbp", -0.101, 0.162, 0.528, 6.089),
        ("challenging", "andmask_tau0.8", 0.554, 0.545, 0.232, 13.022),
        ("challenging", "andmask_tau0.4", 0.566, 0.539, 0.226, 13.272),
        ("challenging", "benchmark", 0.558, 0.535, 0.232, 12.991),
        ("challenging", "lbp", 0.153, 0.356, 0.385, 8.792),
    ],
    "soundspeed": [
        ("lax", "andmask_tau0.8", 0.858, 0.960, 0.055, 26.130),
        ("lax", "andmask_tau0.4", 0.854, 0.958, 0.056, 25.913),
        ("lax", "benchmark", 0.858, 0.958, 0.057, 25.742),
        ("lax", "lbp", -0.117, 0.243, 0.534, 6.024),
        ("challenging", "andmask_tau0.8", 0.634, 0.803, 0.119, 19.202),
        ("challenging", "andmask_tau0.4", 0.636, 0.803, 0.120, 19.131),
        ("challenging", "benchmark", 0.643, 0.814, 0.117, 19.257),
        ("challenging", "lbp", 0.021, 0.211, 0.403, 8.104),
    ],
}


def template_dict(kind: str) -> dict:
    if kind not in _TEMPLATES:
        raise ConfigError(f"unknown template {kind!r}; choose from {', '.join(KINDS)}", "kind")
    d = copy.deepcopy(_TEMPLATES[kind])
    d["kind"] = kind
    d["output_dir"] = f"runs/{kind}"
    return d


def template_config(kind: str, **overrides) -> ExperimentConfig:
    return parse_config(_merge(template_dict(kind), overrides))


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document. Template kinds fill in their environment lists."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    kind = doc.get("kind")
    if kind in _TEMPLATES:
        doc = _merge(template_dict(kind), doc)
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise ConfigError(err["msg"], path) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(doc)
