"""Run configuration: a JSON file parsed into frozen dataclasses.

Every section rejects unknown keys. Command-line flags are applied on top
of the file with :func:`dataclasses.replace`, so precedence is
flag > file > default.

Example::

    {
      "model": "fusion",
      "domain": {"bbox": [0, 0, 3.2, 2.4], "unit": "degrees"},
      "mesh": {"max_edge": 0.3, "extension": 1.0, "outer_edge": 0.6},
      "data": {"stations": "stations.csv", "grid": "grid.csv"},
      "covariates": [
        {"name": "log_elev", "source": "elevation", "transform": "log"},
        {"name": "log_rain", "source": "rainfall", "transform": "log1p"}
      ],
      "priors": {"thresholds": {"sigma_e1": 0.5, "sigma1": 3, "range1": 2}},
      "alpha1_grid": [0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5],
      "optimizer": {"max_iter": 400, "ftol": 1e-6, "restarts": 3},
      "lgocv": {"radii_km": [60, 80, 125, 150]},
      "seed": 1
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import CovariateSpec, ValidationError
from .geometry import Domain, MeshError, build_mesh
from .models import FAMILIES
from .priors import HyperPriorSet, PCPrior
from .simulation import PRIOR_SCENARIOS, SCENARIOS, SimConfig

__all__ = [
    "RunConfig",
    "DomainConfig",
    "MeshConfig",
    "DataConfig",
    "OptimizerConfig",
    "LGOCVConfig",
    "StudyConfig",
    "PredictConfig",
    "load_config",
    "build_priors",
    "range_prior_median",
]


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValidationError(f"unknown keys in {name!r}: {unknown}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {name!r} section: {exc}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass(frozen=True)
class DomainConfig:
    """Study region: ``bbox`` (xmin, ymin, xmax, ymax) or a ``boundary`` ring.

    Without either, the bounding box of the observation locations is used,
    widened by ``padding`` on every side.
    """

    bbox: tuple | None = None
    boundary: tuple | None = None
    unit: str = "degrees"
    padding: float = 0.0

    def __post_init__(self):
        if self.bbox is not None and self.boundary is not None:
            raise ValueError("give either bbox or boundary, not both")
        if self.bbox is not None and len(self.bbox) != 4:
            raise ValueError("bbox needs four numbers")
        if self.unit not in ("degrees", "km"):
            raise ValueError(f"unknown unit {self.unit!r}")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def build(self, points=None) -> Domain:
        if self.boundary is not None:
            return Domain(np.asarray(self.boundary, float), self.unit)
        if self.bbox is not None:
            return Domain.rectangle(*self.bbox, unit=self.unit)
        if points is None or len(points) == 0:
            raise ValidationError("no domain given and no locations to derive it from")
        lo = np.min(points, axis=0) - self.padding
        hi = np.max(points, axis=0) + self.padding
        if np.any(hi - lo <= 0):
            raise ValidationError("observation locations span no area; set domain.bbox or domain.padding")
        return Domain.rectangle(lo[0], lo[1], hi[0], hi[1], unit=self.unit)


@dataclass(frozen=True)
class MeshConfig:
    """Mesh resolution.

    Unset values follow the prior median ``r`` of the latent-field range:
    ``max_edge = r / 5``, ``extension = r`` and ``outer_edge = 2 max_edge``.
    """

    max_edge: float | None = None
    extension: float | None = None
    outer_edge: float | None = None

    def build(self, domain: Domain, priors: HyperPriorSet | None = None):
        r = range_prior_median((priors or HyperPriorSet()).range1)
        max_edge = r / 5.0 if self.max_edge is None else self.max_edge
        ext = r if self.extension is None else self.extension
        try:
            return build_mesh(domain, max_edge, ext, self.outer_edge)
        except MeshError as exc:
            raise ValidationError(str(exc)) from exc


@dataclass(frozen=True)
class DataConfig:
    """Input tables; relative paths are taken from the config file directory."""

    stations: str | None = None
    grid: str | None = None
    targets: str | None = None


@dataclass(frozen=True)
class OptimizerConfig:
    max_iter: int = 400
    ftol: float = 1e-6
    restarts: int = 3
    pilot: bool = True
    theta_grid: bool = False

    def __post_init__(self):
        if self.max_iter < 1 or self.restarts < 0 or not self.ftol > 0:
            raise ValueError("optimizer needs max_iter >= 1, restarts >= 0 and ftol > 0")


@dataclass(frozen=True)
class LGOCVConfig:
    radii_km: tuple = (60.0, 80.0, 125.0, 150.0)

    def __post_init__(self):
        if not self.radii_km or any(not r > 0 for r in self.radii_km):
            raise ValueError("LGOCV radii must be positive")


@dataclass(frozen=True)
class StudyConfig:
    """Replicate study run by ``simulate`` when ``run`` is true."""

    run: bool = False
    families: tuple = FAMILIES
    scenarios: tuple = ("n10",)
    prior_scenarios: tuple = ("matching",)
    replicates: int | None = None
    write_data: bool = True

    def __post_init__(self):
        bad = [f for f in self.families if f not in FAMILIES]
        bad += [s for s in self.scenarios if s not in SCENARIOS]
        bad += [p for p in self.prior_scenarios if p not in PRIOR_SCENARIOS]
        if bad:
            raise ValueError(f"unknown study entries {bad}")


@dataclass(frozen=True)
class PredictConfig:
    calibrate: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: str = "fusion"
    domain: DomainConfig = field(default_factory=DomainConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    data: DataConfig = field(default_factory=DataConfig)
    covariates: tuple = ()
    intercept: bool = True
    priors: dict | None = None
    alpha1_grid: tuple | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lgocv: LGOCVConfig = field(default_factory=LGOCVConfig)
    simulation: SimConfig = field(default_factory=SimConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    out: str = "out"
    seed: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.model not in FAMILIES:
            raise ValidationError(f"unknown model family {self.model!r}; expected one of {FAMILIES}")
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValidationError(f"unknown config keys {unknown}")
        kw = dict(d)
        for key, sub in (
            ("domain", DomainConfig),
            ("mesh", MeshConfig),
            ("optimizer", OptimizerConfig),
            ("lgocv", LGOCVConfig),
            ("study", StudyConfig),
            ("predict", PredictConfig),
        ):
            if key in kw:
                kw[key] = _section(sub, kw[key], key)
        if "data" in kw:
            dc = _section(DataConfig, kw["data"], "data")
            base = Path(base_dir)
            kw["data"] = DataConfig(
                **{k: (None if v is None else str(base / v)) for k, v in dataclasses.asdict(dc).items()}
            )
        if "simulation" in kw:
            try:
                kw["simulation"] = SimConfig.from_dict(kw["simulation"] or {})
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"invalid 'simulation' section: {exc}") from exc
        if "covariates" in kw:
            kw["covariates"] = tuple(CovariateSpec.from_dict(c) for c in kw["covariates"])
        if kw.get("alpha1_grid") is not None:
            kw["alpha1_grid"] = tuple(float(a) for a in kw["alpha1_grid"])
        cfg = cls(**kw)
        build_priors(cfg)  # validate early
        return cfg

    def to_dict(self) -> dict:
        out = _plain(self)
        out["simulation"] = self.simulation.to_dict()
        out["covariates"] = [
            {"name": c.name, "source": list(c.source) if len(c.source) > 1 else c.source[0], "transform": c.transform}
            for c in self.covariates
        ]
        return out

    def with_overrides(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})


def range_prior_median(spec: PCPrior) -> float:
    """Median of a PC range prior: ``P(rho < r) = exp(-lambda / r)`` in two dimensions."""
    return spec.rate / np.log(2.0)


def load_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} line {exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(d, base_dir=path.parent)


def build_priors(cfg: RunConfig) -> HyperPriorSet:
    """Hyperpriors from the ``priors`` section.

    The section is either a full :class:`HyperPriorSet` mapping or the
    shorthand ``{"thresholds": {...}, "prob": 0.5}``. A top-level
    ``alpha1_grid`` replaces the grid (with a uniform prior over it).
    """
    p = dict(cfg.priors or {})
    try:
        if "thresholds" in p:
            th = dict(p.pop("thresholds"))
            prob = p.pop("prob", 0.5)
            if p:
                raise ValidationError(f"unknown keys next to 'thresholds': {sorted(p)}")
            pri = HyperPriorSet.simple(**th, prob=prob)
        else:
            pri = HyperPriorSet.from_dict(p)
        if cfg.alpha1_grid is not None:
            pri = dataclasses.replace(pri, alpha1_grid=tuple(cfg.alpha1_grid), alpha1_weights=None)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid 'priors' section: {exc}") from exc
    return pri
