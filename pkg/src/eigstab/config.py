"""Experiment configuration: schema, presets and assembly into a StudySetup.

A config is a YAML (or JSON) mapping. Only ``study`` is required; every other
section is filled from the preset for ``(study, scale)`` and then overridden
key by key with whatever the file provides. Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .divergence import GaussianDist
from .models import HeatConfig, HeatSensorModel, PriorSpec, analytic_model, scalar_linear
from .quadrature import (
    gauss_hermite,
    gauss_hermite_family,
    gauss_legendre,
    smolyak,
    tensor_all,
    trapezoid,
)
from .stability import DesignGrid, EigConfig, StudySetup
from .surrogate import build_pce, build_perturbed_linear, build_pl_x, build_sparse_multilinear

STUDIES = ("example1_scalar", "analytic_plx", "analytic_sparse", "heat_pce", "custom")
PRESETS = STUDIES[:4]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSpec(_Strict):
    lower: list[float]
    upper: list[float]
    points: list[int]

    @model_validator(mode="after")
    def _check(self):
        if not (len(self.lower) == len(self.upper) == len(self.points)):
            raise ValueError("design_grid lower, upper and points must have the same length")
        for lo, hi, n in zip(self.lower, self.upper, self.points):
            if n < 1 or hi < lo or (n > 1 and hi == lo):
                raise ValueError("design_grid needs n >= 1 and lower < upper (or one point)")
        return self


class PriorConfig(_Strict):
    kind: Literal["uniform_box", "gaussian"]
    lower: list[float] | None = None
    upper: list[float] | None = None
    mean: list[float] | None = None
    cov: list[list[float]] | None = None

    def spec(self) -> PriorSpec:
        if self.kind == "uniform_box":
            if self.lower is None or self.upper is None:
                raise ValueError("uniform_box prior needs lower and upper")
            return PriorSpec.uniform(self.lower, self.upper)
        if self.mean is None or self.cov is None:
            raise ValueError("gaussian prior needs mean and cov")
        return PriorSpec.gaussian(self.mean, self.cov)


class NoiseConfig(_Strict):
    variance: float | None = Field(default=None, gt=0)
    cov: list[list[float]] | None = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.variance is None) == (self.cov is None):
            raise ValueError("noise needs exactly one of variance or cov")
        return self

    def dist(self, dim: int) -> GaussianDist:
        if self.cov is None:
            return GaussianDist.isotropic(dim, self.variance)
        cov = np.asarray(self.cov, float)
        if cov.shape != (dim, dim):
            raise ValueError(f"noise covariance must be {dim}x{dim} to match the data dimension")
        return GaussianDist(np.zeros(dim), cov)


class RuleConfig(_Strict):
    family: Literal["trapezoid", "gauss_legendre", "gauss_hermite", "smolyak_gauss_hermite"]
    nodes: int | None = Field(default=None, ge=1)
    level: int | None = Field(default=None, ge=0)


class QuadratureConfig(_Strict):
    prior: RuleConfig
    noise: RuleConfig
    l2: RuleConfig | None = None
    projection: RuleConfig | None = None
    fidelity_prior: RuleConfig | None = None
    fidelity_noise: RuleConfig | None = None


class ModelConfig(_Strict):
    kind: Literal["scalar_linear", "analytic", "heat"]
    a: float = 1.0


class SurrogateConfig(_Strict):
    kind: Literal["perturbed_linear", "piecewise_linear_x", "sparse_multilinear", "pce"]
    box_lower: list[float] | None = None
    box_upper: list[float] | None = None
    index_set: Literal["total", "tensor"] = "total"


class HeatSection(_Strict):
    spatial_n: int = 41
    dt: float = 1.0 / 400.0
    bdf_order: int = 4
    s: float = 2.0
    h: float = 0.05
    tau: float = 0.3
    obs_times: list[float] = [0.08, 0.16, 0.24, 0.32, 0.40]
    T: float = 0.4

    def build(self) -> HeatConfig:
        return HeatConfig(self.spatial_n, self.dt, self.bdf_order, self.s, self.h, self.tau,
                          tuple(self.obs_times), self.T)


class ChecksConfig(_Strict):
    enabled: bool = True
    monotone: bool = True
    argmax: bool = True
    reference_slope: float | None = None
    slope_tolerance: float = 0.4
    log_power: float = 0.0
    raw_slope_max: float | None = None
    half_rate: bool = False
    k_ratio_limit: float | None = None
    fidelity: bool = False


class ExperimentConfig(_Strict):
    study: Literal["example1_scalar", "analytic_plx", "analytic_sparse", "heat_pce", "custom"]
    scale: Literal["desk", "paper"] = "desk"
    ladder: list[int]
    design_grid: GridSpec
    quadrature: QuadratureConfig
    noise: NoiseConfig
    prior: PriorConfig
    model: ModelConfig
    surrogate: SurrogateConfig
    heat: HeatSection | None = None
    checks: ChecksConfig = ChecksConfig()
    output_dir: str = "runs"
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)

    @field_validator("ladder")
    @classmethod
    def _ladder(cls, v):
        if not v:
            raise ValueError("ladder is empty")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("ladder not increasing")
        if v[0] < 0:
            raise ValueError("ladder entries must be nonnegative")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        dims = _model_dims(self)
        pdim, ddim, _ = dims
        if len(self.design_grid.lower) != ddim:
            raise ValueError(f"design_grid has dimension {len(self.design_grid.lower)}, model needs {ddim}")
        if self.prior.spec().dim != pdim:
            raise ValueError(f"prior has dimension {self.prior.spec().dim}, model needs {pdim}")
        if self.model.kind == "heat" and self.heat is None:
            raise ValueError("heat model needs a heat section")
        kind = self.surrogate.kind
        allowed = {"scalar_linear": ("perturbed_linear",), "analytic": ("piecewise_linear_x", "sparse_multilinear", "pce"),
                   "heat": ("sparse_multilinear", "pce")}[self.model.kind]
        if kind not in allowed:
            raise ValueError(f"surrogate {kind!r} does not fit model {self.model.kind!r}")
        if kind in ("sparse_multilinear", "pce"):
            lo, hi = self.surrogate.box_lower, self.surrogate.box_upper
            if lo is None or hi is None or len(lo) != pdim + ddim or len(hi) != pdim + ddim:
                raise ValueError(f"surrogate box must have dimension {pdim + ddim}")
            if np.any(np.asarray(self.design_grid.lower) < np.asarray(lo[pdim:]) - 1e-12) or np.any(
                    np.asarray(self.design_grid.upper) > np.asarray(hi[pdim:]) + 1e-12):
                raise ValueError("design grid leaves the surrogate box")
            if kind == "pce" and self.quadrature.projection is None:
                raise ValueError("pce surrogate needs quadrature.projection")
        if self.checks.fidelity and (self.quadrature.fidelity_prior is None or self.quadrature.fidelity_noise is None):
            raise ValueError("checks.fidelity needs quadrature.fidelity_prior and fidelity_noise")
        return self


def _model_dims(cfg) -> tuple:
    if cfg.model.kind == "scalar_linear":
        return 1, 2, 1
    if cfg.model.kind == "analytic":
        return 1, 2, 2
    n_times = len(cfg.heat.obs_times) if cfg.heat is not None else 5
    return 2, 2, n_times


# ---------------------------------------------------------------------------
# presets


_ANALYTIC_QUAD = {
    "prior": {"family": "trapezoid", "nodes": 201},
    "noise": {"family": "smolyak_gauss_hermite", "level": 3},
    "l2": {"family": "trapezoid", "nodes": 1001},
    "fidelity_prior": {"family": "trapezoid", "nodes": 401},
    "fidelity_noise": {"family": "smolyak_gauss_hermite", "level": 4},
}

_DESK = {
    "example1_scalar": {
        "ladder": [2, 4, 8, 16],
        "design_grid": {"lower": [0.0, 0.0], "upper": [0.0, 0.0], "points": [1, 1]},
        "quadrature": {"prior": {"family": "gauss_hermite", "nodes": 64},
                       "noise": {"family": "gauss_hermite", "nodes": 64}},
        "noise": {"variance": 1.0},
        "prior": {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "model": {"kind": "scalar_linear", "a": 1.0},
        "surrogate": {"kind": "perturbed_linear"},
        "checks": {"argmax": False, "reference_slope": -1.0, "slope_tolerance": 0.05},
    },
    "analytic_plx": {
        "ladder": [4, 8, 16, 32, 64, 128],
        "design_grid": {"lower": [0.0, 0.0], "upper": [1.0, 1.0], "points": [11, 11]},
        "quadrature": _ANALYTIC_QUAD,
        "noise": {"variance": 1e-4},
        "prior": {"kind": "uniform_box", "lower": [0.0], "upper": [1.0]},
        "model": {"kind": "analytic"},
        "surrogate": {"kind": "piecewise_linear_x"},
        "checks": {"reference_slope": -2.0, "half_rate": True, "k_ratio_limit": 2.0},
    },
    "analytic_sparse": {
        "ladder": [2, 3, 4, 5, 6],
        "design_grid": {"lower": [0.2, 0.2], "upper": [1.0, 1.0], "points": [11, 11]},
        "quadrature": _ANALYTIC_QUAD,
        "noise": {"variance": 1e-4},
        "prior": {"kind": "uniform_box", "lower": [0.0], "upper": [1.0]},
        "model": {"kind": "analytic"},
        "surrogate": {"kind": "sparse_multilinear", "box_lower": [0.0, 0.2, 0.2], "box_upper": [1.0, 1.0, 1.0]},
        "checks": {"argmax": False, "reference_slope": -2.0, "log_power": 6.0, "raw_slope_max": -1.3},
    },
    "heat_pce": {
        "ladder": [2, 4, 6],
        "design_grid": {"lower": [0.1, 0.1], "upper": [0.9, 0.9], "points": [11, 11]},
        "quadrature": {"prior": {"family": "gauss_legendre", "nodes": 12},
                       "noise": {"family": "smolyak_gauss_hermite", "level": 2},
                       "projection": {"family": "gauss_legendre", "nodes": 8}},
        "noise": {"variance": 0.01},
        "prior": {"kind": "uniform_box", "lower": [0.0, 0.0], "upper": [1.0, 1.0]},
        "model": {"kind": "heat"},
        "surrogate": {"kind": "pce", "box_lower": [0.0] * 4, "box_upper": [1.0] * 4},
        "heat": {},
        "checks": {"argmax": False},
    },
}

# full-size grids and ladders; these take hours on one core
_PAPER_OVERRIDES = {
    "example1_scalar": {},
    "analytic_plx": {
        "ladder": [8, 16, 32, 64, 128, 256],
        "design_grid": {"points": [21, 21]},
        "quadrature": {"prior": {"family": "trapezoid", "nodes": 251},
                       "noise": {"family": "smolyak_gauss_hermite", "level": 4}},
    },
    "analytic_sparse": {
        "ladder": [2, 3, 4, 5, 6, 7, 8],
        "design_grid": {"points": [31, 31]},
        "quadrature": {"prior": {"family": "trapezoid", "nodes": 251},
                       "noise": {"family": "smolyak_gauss_hermite", "level": 4}},
    },
    "heat_pce": {
        "ladder": [2, 4, 6, 8, 10],
        "design_grid": {"lower": [0.0, 0.0], "upper": [1.0, 1.0], "points": [40, 40]},
        "quadrature": {"prior": {"family": "gauss_legendre", "nodes": 16},
                       "noise": {"family": "smolyak_gauss_hermite", "level": 3},
                       "projection": {"family": "gauss_legendre", "nodes": 12}},
        "heat": {"spatial_n": 81},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def preset(study: str, scale: str = "desk") -> dict:
    """Raw preset mapping for ``study`` at ``scale``."""
    if study not in PRESETS:
        raise ConfigError(f"no preset for study {study!r}; presets: {', '.join(PRESETS)}")
    if scale not in ("desk", "paper"):
        raise ConfigError(f"unknown scale {scale!r}")
    base = {"study": study, "scale": scale, **copy.deepcopy(_DESK[study])}
    return _merge(base, _PAPER_OVERRIDES[study]) if scale == "paper" else base


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        msg = err["msg"].removeprefix("Value error, ")
        parts.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(parts)


def config_from_mapping(raw: dict, scale: str | None = None) -> ExperimentConfig:
    """Validate a raw mapping, filling defaults from the matching preset."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if "study" not in raw:
        raise ConfigError("study: missing required key")
    raw = dict(raw)
    if scale is not None:
        raw["scale"] = scale
    study = raw["study"]
    base = preset(study, raw.get("scale", "desk")) if study in PRESETS else {}
    try:
        return ExperimentConfig.model_validate(_merge(base, raw))
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(source, scale: str | None = None) -> ExperimentConfig:
    """Parse a config from a path or from inline YAML/JSON text."""
    text = None
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and not source.lstrip().startswith("{")):
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    else:
        text = str(source)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return config_from_mapping(raw if raw is not None else {}, scale)


# ---------------------------------------------------------------------------
# assembly


def _rule(rc: RuleConfig, lower=None, upper=None, dim: int = 1):
    fam = rc.family
    if fam == "smolyak_gauss_hermite":
        if rc.level is None:
            raise ConfigError("smolyak_gauss_hermite needs a level")
        return smolyak(dim, rc.level, gauss_hermite_family())
    if rc.nodes is None:
        raise ConfigError(f"{fam} needs a node count")
    if fam == "gauss_hermite":
        return tensor_all([gauss_hermite(rc.nodes)] * dim)
    make = trapezoid if fam == "trapezoid" else gauss_legendre
    return tensor_all([make(rc.nodes, a, b) for a, b in zip(lower, upper)])


def _prior_rule(cfg: ExperimentConfig, rc: RuleConfig):
    spec = cfg.prior.spec()
    if spec.kind == "gaussian":
        if rc.family != "gauss_hermite":
            raise ConfigError("a gaussian prior needs a gauss_hermite prior rule")
        return spec.rule(rc.nodes, "gauss_hermite")
    if rc.family not in ("trapezoid", "gauss_legendre"):
        raise ConfigError("a uniform prior needs a trapezoid or gauss_legendre prior rule")
    return spec.rule(rc.nodes, rc.family)


def build_model(cfg: ExperimentConfig):
    kind = cfg.model.kind
    if kind == "scalar_linear":
        return scalar_linear(cfg.model.a)
    if kind == "analytic":
        return analytic_model(cfg.design_grid.lower, cfg.design_grid.upper)
    return HeatSensorModel(cfg.heat.build()).as_model()


def build_eig_config(cfg: ExperimentConfig, fidelity: bool = False) -> EigConfig:
    _, _, data_dim = _model_dims(cfg)
    q = cfg.quadrature
    prior_rc, noise_rc = (q.fidelity_prior, q.fidelity_noise) if fidelity else (q.prior, q.noise)
    prior_rule = _prior_rule(cfg, prior_rc)
    noise_rule = _rule(noise_rc, dim=data_dim)
    if noise_rule.weight_kind != "gaussian":
        raise ConfigError("the noise rule must be a Gauss-Hermite family")
    l2 = _prior_rule(cfg, q.l2) if q.l2 is not None else None
    return EigConfig(prior_rule, noise_rule, cfg.noise.dist(data_dim), l2)


def surrogate_builder(cfg: ExperimentConfig, model):
    sc = cfg.surrogate
    if sc.kind == "perturbed_linear":
        return lambda n: build_perturbed_linear(model, cfg.model.a, n)
    if sc.kind == "piecewise_linear_x":
        return lambda n: build_pl_x(model, n)
    if sc.kind == "sparse_multilinear":
        return lambda level: build_sparse_multilinear(model, level, sc.box_lower, sc.box_upper)
    proj = _rule(cfg.quadrature.projection, sc.box_lower, sc.box_upper)
    return lambda degree: build_pce(model, degree, proj, sc.box_lower, sc.box_upper, sc.index_set)


def build_setup(cfg: ExperimentConfig, threads: int | None = None) -> StudySetup:
    """Construct the model, rules and surrogate ladder described by ``cfg``."""
    try:
        model = build_model(cfg)
        eig_cfg = build_eig_config(cfg)
        fidelity = build_eig_config(cfg, fidelity=True) if cfg.checks.fidelity else None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    g = cfg.design_grid
    ch = cfg.checks
    return StudySetup(
        name=cfg.study,
        model=model,
        build_surrogate=surrogate_builder(cfg, model),
        ladder=list(cfg.ladder),
        grid=DesignGrid.uniform(g.lower, g.upper, g.points),
        eig_cfg=eig_cfg,
        checks=ch.enabled,
        threads=threads or cfg.threads,
        log_power=ch.log_power,
        reference_slope=ch.reference_slope,
        slope_tolerance=ch.slope_tolerance,
        require_monotone=ch.monotone,
        check_argmax=ch.argmax,
        k_ratio_limit=ch.k_ratio_limit,
        raw_slope_max=ch.raw_slope_max,
        half_rate=ch.half_rate,
        fidelity_cfg=fidelity,
    )
