"""Purely spatial simulation study: data-generating process, layouts and runner.

The latent field, the covariate and the forecast error field are sampled
as SPDE GMRFs on a fine simulation mesh. Stations sit at fixed layouts
shipped as CSV fixtures; the forecast grid is a regular subset of the
dense prediction grid.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import Domain, build_mesh, project
from .inference import bma_fit, bma_predict
from .linalg import SparseCholesky
from .metrics import (
    FieldEstimate,
    ScoreReport,
    avg_ds_score,
    avg_posterior_sd,
    avg_squared_error,
    relative_error,
)
from .models import FAMILIES, ObservationSet, Targets
from .priors import HyperPriorSet
from .spde import MaternParams, spde_precision

__all__ = [
    "SimConfig",
    "SimReplicate",
    "simulate_replicate",
    "station_layouts",
    "generate_layouts",
    "write_layouts",
    "study_priors",
    "fit_mesh",
    "score_replicate",
    "run_study",
    "SCENARIOS",
    "PRIOR_SCENARIOS",
]

log = logging.getLogger(__name__)

SCENARIOS = ("n10", "n25", "n40")
PRIOR_SCENARIOS = ("matching", "nonmatching")

# PC thresholds for the non-matching scenario
_NONMATCHING = dict(sigma_e1=1.5, sigma_e2=0.5, sigma1=1.0, range1=0.5, sigma2=0.5, range2=0.5)


@dataclass(frozen=True)
class SimConfig:
    """Settings of the simulation study (desk-scale defaults)."""

    domain: tuple = (0.0, 0.0, 3.2, 2.4)
    z_range: float = 3.0
    z_sigma: float = 1.0
    xi_range: float = 2.0
    xi_sigma: float = 3.16
    beta: tuple = (10.0, 3.0)
    var_e1: float = 0.25
    var_e2: float = 0.01
    a0_range: float = 1.0
    a0_sigma: float = 1.0
    alpha1: float = 1.1
    scenario: str = "n10"
    prior_scenario: str = "matching"
    sim_grid: tuple = (30, 30)
    forecast_stride: int = 3
    sim_max_edge: float = 0.12
    mesh_max_edge: float = 0.3
    mesh_extension: float = 1.0
    mesh_outer_edge: float = 0.6
    alpha1_grid: tuple = tuple(np.round(np.arange(0.5, 1.5001, 0.1), 10))
    replicates: int = 50
    base_seed: int = 20240
    max_iter: int = 400
    restarts: int = 3

    def __post_init__(self):
        for name in ("z_sigma", "xi_sigma", "var_e1", "var_e2", "a0_sigma", "z_range", "xi_range", "a0_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown station scenario {self.scenario!r}")
        if self.prior_scenario not in PRIOR_SCENARIOS:
            raise ValueError(f"unknown prior scenario {self.prior_scenario!r}")
        if len(self.domain) != 4 or not (self.domain[2] > self.domain[0] and self.domain[3] > self.domain[1]):
            raise ValueError("domain must be (xmin, ymin, xmax, ymax) with positive extent")
        if len(self.beta) != 2:
            raise ValueError("beta must hold (beta0, beta1)")
        if self.forecast_stride < 1 or min(self.sim_grid) < self.forecast_stride:
            raise ValueError("forecast stride must fit inside the simulation grid")
        if self.replicates < 0:
            raise ValueError("replicate count must be non-negative")

    @property
    def domain_obj(self) -> Domain:
        return Domain.rectangle(*self.domain, unit="degrees")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown simulation keys {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class SimReplicate:
    """One simulated data set with the true fields on the prediction grid."""

    seed: int
    grid_xy: np.ndarray
    x: np.ndarray
    z: np.ndarray
    alpha0: np.ndarray
    forecast_index: np.ndarray
    data: ObservationSet
    station_x: np.ndarray = field(repr=False)

    @property
    def targets(self) -> Targets:
        return Targets(self.grid_xy, 1, self.z)


# --- station layouts -------------------------------------------------------


def _poisson_disk(rng, n, inside, min_dist, box, max_tries=20000):
    pts = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place stations; relax the spacing")
        p = rng.uniform(box[:2], box[2:])
        if not inside(p):
            continue
        if pts and np.min(np.hypot(*(np.array(pts) - p).T)) < min_dist:
            continue
        pts.append(p)
    return np.array(pts)


def generate_layouts(domain=(0.0, 0.0, 3.2, 2.4), seed: int = 7) -> dict:
    """Construct the three station layouts.

    ``n10`` fills only the western part of the region, ``n25`` covers it
    except for a large north-eastern block, ``n40`` is a jittered lattice.
    """
    x0, y0, x1, y1 = domain
    w, h = x1 - x0, y1 - y0
    m = 0.06 * min(w, h)
    box = np.array([x0 + m, y0 + m, x1 - m, y1 - m])
    rng = np.random.default_rng(seed)

    n10 = _poisson_disk(rng, 10, lambda p: p[0] < x0 + 0.5 * w, 0.08 * min(w, h), box)
    gap = lambda p: not (p[0] > x0 + 0.55 * w and p[1] > y0 + 0.45 * h)
    n25 = _poisson_disk(rng, 25, gap, 0.13 * min(w, h), box)
    gx = x0 + w * (np.arange(8) + 0.5) / 8
    gy = y0 + h * (np.arange(5) + 0.5) / 5
    lat = np.array([(a, b) for b in gy for a in gx])
    n40 = lat + rng.uniform(-0.03, 0.03, lat.shape) * np.array([w, h]) / 2
    return {"n10": n10, "n25": n25, "n40": n40}


def write_layouts(directory, layouts: dict | None = None) -> list:
    """Write layout fixtures ``<scenario>.csv`` into ``directory``."""
    layouts = generate_layouts() if layouts is None else layouts
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, pts in layouts.items():
        path = directory / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["station_id", "x", "y"])
            for i, (a, b) in enumerate(pts):
                wr.writerow([f"s{i + 1:02d}", repr(float(a)), repr(float(b))])
        out.append(path)
    return out


@lru_cache(maxsize=None)
def _read_layout(scenario: str) -> tuple:
    text = resources.files("gmrf_fusion").joinpath("data", "layouts", f"{scenario}.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    ids = tuple(r["station_id"] for r in rows)
    xy = tuple((float(r["x"]), float(r["y"])) for r in rows)
    return ids, xy


def station_layouts(scenario: str) -> np.ndarray:
    """Fixed station coordinates of a scenario, shape ``(n_M, 2)``."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown station scenario {scenario!r}")
    return np.array(_read_layout(scenario)[1])


def _layout_ids(scenario):
    return np.array(_read_layout(scenario)[0])


# --- data-generating process --------------------------------------------


@lru_cache(maxsize=8)
def _sim_setup(domain: tuple, max_edge: float, extension: float):
    mesh = build_mesh(Domain.rectangle(*domain), max_edge, extension)
    return mesh


@lru_cache(maxsize=32)
def _sampler(domain, max_edge, extension, range_, sigma):
    mesh = _sim_setup(domain, max_edge, extension)
    return SparseCholesky(spde_precision(mesh, MaternParams(range_, sigma)))


def _grid_points(domain, shape):
    x0, y0, x1, y1 = domain
    nx, ny = shape
    xs = x0 + (x1 - x0) * (np.arange(nx) + 0.5) / nx
    ys = y0 + (y1 - y0) * (np.arange(ny) + 0.5) / ny
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


def _forecast_index(shape, stride):
    nx, ny = shape
    c = stride // 2
    ix = np.arange(c, nx, stride)
    iy = np.arange(c, ny, stride)
    return np.array([j * nx + i for j in iy for i in ix])


def simulate_replicate(cfg: SimConfig, seed: int) -> SimReplicate:
    """Draw one data set; identical output for identical ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    key = (tuple(cfg.domain), cfg.sim_max_edge, cfg.mesh_extension)
    mesh = _sim_setup(*key)
    z_f = _sampler(*key, cfg.z_range, cfg.z_sigma).sample(rng)
    xi_f = _sampler(*key, cfg.xi_range, cfg.xi_sigma).sample(rng)
    a0_f = _sampler(*key, cfg.a0_range, cfg.a0_sigma).sample(rng)

    grid = _grid_points(cfg.domain, cfg.sim_grid)
    stations = station_layouts(cfg.scenario)
    Pg = project(mesh, grid)
    Ps = project(mesh, stations)
    b0, b1 = cfg.beta
    z_g, z_s = Pg @ z_f, Ps @ z_f
    x_g = b0 + b1 * z_g + Pg @ xi_f
    x_s = b0 + b1 * z_s + Ps @ xi_f
    a0_g = Pg @ a0_f

    fidx = _forecast_index(cfg.sim_grid, cfg.forecast_stride)
    e1 = rng.normal(scale=math.sqrt(cfg.var_e1), size=len(stations))
    e2 = rng.normal(scale=math.sqrt(cfg.var_e2), size=len(fidx))
    w1 = x_s + e1
    w2 = a0_g[fidx] + cfg.alpha1 * x_g[fidx] + e2

    data = ObservationSet(
        station_id=_layout_ids(cfg.scenario),
        station_xy=stations,
        station_t=np.ones(len(stations), int),
        station_value=w1,
        station_z=z_s[:, None],
        grid_id=np.array([f"g{j + 1:03d}" for j in range(len(fidx))]),
        grid_xy=grid[fidx],
        grid_t=np.ones(len(fidx), int),
        grid_value=w2,
        grid_z=z_g[fidx][:, None],
        covariate_names=("z",),
        unit="degrees",
    )
    return SimReplicate(int(seed), grid, x_g, z_g, a0_g, fidx, data, x_s)


# --- study ---------------------------------------------------------------


def study_priors(cfg: SimConfig, prior_scenario: str | None = None) -> HyperPriorSet:
    """PC priors of the matching (true values) or non-matching scenario."""
    ps = cfg.prior_scenario if prior_scenario is None else prior_scenario
    if ps == "matching":
        th = dict(
            sigma_e1=math.sqrt(cfg.var_e1),
            sigma_e2=math.sqrt(cfg.var_e2),
            sigma1=cfg.xi_sigma,
            range1=cfg.xi_range,
            sigma2=cfg.a0_sigma,
            range2=cfg.a0_range,
        )
    elif ps == "nonmatching":
        th = dict(_NONMATCHING)
    else:
        raise ValueError(f"unknown prior scenario {ps!r}")
    return HyperPriorSet.simple(**th, prob=0.5, alpha1_grid=tuple(cfg.alpha1_grid))


@lru_cache(maxsize=8)
def _fit_mesh(domain, max_edge, extension, outer_edge):
    return build_mesh(Domain.rectangle(*domain), max_edge, extension, outer_edge)


def fit_mesh(cfg: SimConfig):
    """Mesh used by the fitted models (coarser than the simulation mesh)."""
    return _fit_mesh(tuple(cfg.domain), cfg.mesh_max_edge, cfg.mesh_extension, cfg.mesh_outer_edge)


def _truth(cfg: SimConfig) -> dict:
    return {
        "sigma_e1": math.sqrt(cfg.var_e1),
        "sigma1": cfg.xi_sigma,
        "range1": cfg.xi_range,
        "beta0": cfg.beta[0],
        "beta1": cfg.beta[1],
    }


def score_replicate(cfg: SimConfig, rep: SimReplicate, family: str, ensemble, scenario: str) -> ScoreReport:
    """Field, DS and parameter scores of one fitted replicate."""
    mean, sd = bma_predict(ensemble, rep.targets)
    est = FieldEstimate(mean, sd, rep.x)
    out = ScoreReport()
    key = (family, scenario, rep.seed, None)
    out.add(*key, "avg_squared_error", avg_squared_error(est))
    out.add(*key, "avg_posterior_sd", avg_posterior_sd(est))
    out.add(*key, "avg_ds_score", avg_ds_score(est))
    truth = _truth(cfg)
    th = ensemble.theta_hat()
    out.add(*key, "rel_error_sigma_e1", relative_error(th["sigma_e1"], truth["sigma_e1"]))
    if family != "regcalib":
        out.add(*key, "rel_error_sigma1", relative_error(th["sigma1"], truth["sigma1"]))
        out.add(*key, "rel_error_range1", relative_error(th["range1"], truth["range1"]))
        bm, bv = ensemble.block_moments("beta")
        out.add(*key, "rel_error_beta0", relative_error(bm[0], truth["beta0"]))
        out.add(*key, "rel_error_beta1", relative_error(bm[1], truth["beta1"]))
        out.add(*key, "post_sd_beta0", math.sqrt(bv[0]))
        out.add(*key, "post_sd_beta1", math.sqrt(bv[1]))
    if family == "fusion":
        out.add(*key, "alpha1_hat", ensemble.alpha1_hat)
        for m in ensemble.members:
            out.add(*key, f"bma_weight[{m.alpha1:.1f}]", m.weight)
    return out


def _replicate_job(args):
    cfg, families, seed, scenario, prior_scenario = args
    c = replace(cfg, scenario=scenario, prior_scenario=prior_scenario)
    label = f"{scenario}-{prior_scenario}"
    rep_out = ScoreReport()
    try:
        rep = simulate_replicate(c, seed)
    except Exception as exc:  # recorded, not dropped
        log.warning("replicate %s (%s) failed to simulate: %s", seed, label, exc)
        for fam in families:
            rep_out.add(fam, label, seed, None, "failed", 1.0)
        return rep_out
    mesh = fit_mesh(c)
    priors = study_priors(c)
    for fam in families:
        try:
            ens = bma_fit(
                rep.data,
                mesh,
                priors,
                family=fam,
                seed=seed,
                max_iter=c.max_iter,
                restarts=c.restarts,
            )
            rep_out.extend(score_replicate(c, rep, fam, ens, label))
            rep_out.add(fam, label, seed, None, "failed", 0.0)
        except Exception as exc:
            log.warning("replicate %s (%s, %s) failed: %s", seed, label, fam, exc)
            rep_out.add(fam, label, seed, None, "failed", 1.0)
    return rep_out


def run_study(
    cfg: SimConfig,
    model_families=FAMILIES,
    replicates: int | None = None,
    scenarios=None,
    prior_scenarios=None,
    threads: int = 1,
):
    """Yield one :class:`ScoreReport` per replicate and scenario pair.

    Replicate ``r`` uses seed ``base_seed + r`` in every scenario, so station
    scenarios and prior scenarios are compared on the same random draws.
    Failures are recorded as ``failed = 1`` rows rather than dropped.
    """
    n = cfg.replicates if replicates is None else int(replicates)
    scenarios = (cfg.scenario,) if scenarios is None else tuple(scenarios)
    prior_scenarios = (cfg.prior_scenario,) if prior_scenarios is None else tuple(prior_scenarios)
    families = tuple(model_families)
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"unknown model family {f!r}")
    jobs = [
        (cfg, families, cfg.base_seed + r, s, p)
        for s in scenarios
        for p in prior_scenarios
        for r in range(n)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            yield from ex.map(_replicate_job, jobs)
    else:
        for j in jobs:
            yield _replicate_job(j)
