"""Scoring rules and error summaries for fitted fields and held-out predictions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FieldEstimate",
    "ScoreRecord",
    "ScoreReport",
    "avg_squared_error",
    "avg_posterior_sd",
    "ds_score",
    "avg_ds_score",
    "scaled_ds",
    "relative_error",
    "lgocv_scores",
    "gaussian_kl",
    "SCORE_COLUMNS",
]

SCORE_COLUMNS = ("model", "scenario", "replicate", "radius", "score_name", "value")
_DS_EPS = 1e-9


@dataclass(frozen=True)
class FieldEstimate:
    """Posterior summaries of a field on a prediction grid."""

    mean: np.ndarray
    sd: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, float).ravel()
        sd = np.asarray(self.sd, float).ravel()
        if mean.shape != sd.shape:
            raise ValueError("mean and sd must be aligned")
        if np.any(sd < 0):
            raise ValueError("posterior SDs must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)
        if self.truth is not None:
            truth = np.asarray(self.truth, float).ravel()
            if truth.shape != mean.shape:
                raise ValueError("truth must be aligned with mean")
            object.__setattr__(self, "truth", truth)

    def __len__(self):
        return len(self.mean)


def _nonempty(est: FieldEstimate):
    if len(est) == 0:
        raise ValueError("empty prediction grid")


def avg_squared_error(est: FieldEstimate) -> float:
    """Grid average of ``(x - E[x|y])^2``."""
    _nonempty(est)
    if est.truth is None:
        raise ValueError("true field values are required")
    return float(np.mean((est.truth - est.mean) ** 2))


def avg_posterior_sd(est: FieldEstimate) -> float:
    _nonempty(est)
    return float(np.mean(est.sd))


def ds_score(y, mean, var):
    """Dawid-Sebastiani score ``(y - mean)^2 / var + log(var)``."""
    var = np.asarray(var, float)
    if np.any(~(var > 0)):
        raise ValueError("predictive variance must be positive")
    out = (np.asarray(y, float) - mean) ** 2 / var + np.log(var)
    return float(out) if np.ndim(out) == 0 else out


def avg_ds_score(est: FieldEstimate) -> float:
    """Grid average DS score of the true field under the posterior."""
    _nonempty(est)
    if est.truth is None:
        raise ValueError("true field values are required")
    return float(np.mean(ds_score(est.truth, est.mean, est.sd**2)))


def scaled_ds(scores) -> np.ndarray:
    """Plotting transform ``log(s + |min s| + eps)``; order preserving."""
    s = np.asarray(scores, float)
    if s.size == 0:
        raise ValueError("no scores to scale")
    return np.log(s + abs(s.min()) + _DS_EPS)


def relative_error(estimate: float, truth: float) -> float:
    if truth == 0:
        raise ValueError("relative error is undefined for a zero true value")
    return abs((estimate - truth) / truth)


@dataclass(frozen=True)
class ScoreRecord:
    model: str
    scenario: str
    replicate: int | str
    radius: float | str
    score_name: str
    value: float

    def row(self) -> list:
        v = self.value
        return [
            self.model,
            self.scenario,
            self.replicate,
            "" if self.radius is None else self.radius,
            self.score_name,
            "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v)),
        ]


@dataclass
class ScoreReport:
    """Long-format score table.

    A non-finite value must be added with ``flag=True``; its position is
    kept in ``flagged``.
    """

    records: list = field(default_factory=list)
    flagged: set = field(default_factory=set)

    def add(self, model, scenario, replicate, radius, score_name, value, flag=False):
        value = float(value)
        if not np.isfinite(value) and not flag:
            raise ValueError(f"non-finite score {score_name}={value} must be flagged")
        rec = ScoreRecord(model, scenario, replicate, radius, score_name, value)
        if flag:
            self.flagged.add(len(self.records))
        self.records.append(rec)
        return rec

    def extend(self, other: "ScoreReport"):
        off = len(self.records)
        self.records.extend(other.records)
        self.flagged.update(i + off for i in other.flagged)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def values(self, score_name: str, **keys) -> np.ndarray:
        out = []
        for r in self.records:
            if r.score_name != score_name:
                continue
            if all(getattr(r, k) == v for k, v in keys.items()):
                out.append(r.value)
        return np.array(out, float)

    def as_dict(self) -> dict:
        """``{score_name: value}`` for a report with unique names."""
        return {r.score_name: r.value for r in self.records}

    def write_csv(self, path, append=False):
        mode = "a" if append else "w"
        with open(path, mode, newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not append:
                w.writerow(SCORE_COLUMNS)
            for r in self.records:
                w.writerow(r.row())

    @classmethod
    def read_csv(cls, path) -> "ScoreReport":
        rep = cls()
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if tuple(rd.fieldnames or ()) != SCORE_COLUMNS:
                raise ValueError(f"{path}: unexpected score columns {rd.fieldnames}")
            for row in rd:
                radius = row["radius"]
                rep.add(
                    row["model"],
                    row["scenario"],
                    row["replicate"],
                    float(radius) if radius else None,
                    row["score_name"],
                    float(row["value"]),
                    flag=True,
                )
        rep.flagged = {i for i, r in enumerate(rep.records) if not np.isfinite(r.value)}
        return rep


def gaussian_kl(m1, s1, m2, s2):
    """``KL(N(m1, s1^2) || N(m2, s2^2))``.

    Written as ``f(r - 1) + (m1 - m2)^2 / (2 s2^2)`` with ``r = s1 / s2`` and
    ``f(d) = d + d^2/2 - log1p(d)``, which is non-negative term by term; a
    short series replaces ``f`` near zero to avoid cancellation.
    """
    m1, s1, m2, s2 = (np.asarray(a, float) for a in (m1, s1, m2, s2))
    d = s1 / s2 - 1.0
    small = np.abs(d) < 1e-3
    ds = np.where(small, d, 0.0)
    series = ds**2 * (1.0 - ds / 3.0 + ds**2 / 4.0 - ds**3 / 5.0)
    dl = np.where(small, 0.0, d)
    direct = dl + 0.5 * dl**2 - np.log1p(dl)
    out = np.where(small, series, direct) + (m1 - m2) ** 2 / (2.0 * s2**2)
    return float(out) if out.ndim == 0 else out


def lgocv_scores(
    y,
    pred_mean,
    pred_sd,
    full_mean,
    full_sd,
    obs_sd=None,
    model="",
    scenario="",
    replicate="",
    radius=None,
) -> ScoreReport:
    """Held-out prediction scores.

    Parameters
    ----------
    y : array_like
        Observed station values.
    pred_mean, pred_sd : array_like
        Held-out predictive mean and SD of the latent process.
    full_mean, full_sd : array_like
        Full-data predictive mean and SD of the latent process.
    obs_sd : array_like, optional
        Held-out predictive SD of the observation, used for the log
        density (defaults to ``pred_sd``).

    Returns
    -------
    ScoreReport
        ``ULGOCV``, ``RMSE``, ``MAE``, ``MAPE``, ``MSD``, ``MKLD``,
        ``n_points`` and ``MAPE_zero_excluded``.
    """
    y = np.asarray(y, float)
    m1 = np.asarray(pred_mean, float)
    s1 = np.asarray(pred_sd, float)
    m2 = np.asarray(full_mean, float)
    s2 = np.asarray(full_sd, float)
    so = s1 if obs_sd is None else np.asarray(obs_sd, float)
    if len(y) == 0:
        raise ValueError("no held-out predictions to score")
    if np.any(~(s1 > 0)) or np.any(~(s2 > 0)) or np.any(~(so > 0)):
        raise ValueError("predictive SDs must be positive")

    logdens = -0.5 * np.log(2 * np.pi) - np.log(so) - 0.5 * ((y - m1) / so) ** 2
    err = y - m1
    nz = y != 0
    kl = gaussian_kl(m1, s1, m2, s2)

    rep = ScoreReport()
    key = (model, scenario, replicate, radius)
    rep.add(*key, "ULGOCV", np.mean(logdens))
    scale = np.max(np.abs(err))
    rmse = scale * np.sqrt(np.mean((err / scale) ** 2)) if scale > 0 else 0.0  # no underflow
    rep.add(*key, "RMSE", rmse)
    rep.add(*key, "MAE", np.mean(np.abs(err)))
    with np.errstate(over="ignore"):
        mape = np.mean(np.abs(err[nz] / y[nz])) if np.any(nz) else np.nan
    rep.add(*key, "MAPE", mape, flag=not np.isfinite(mape))
    rep.add(*key, "MSD", np.mean(s1))
    rep.add(*key, "MKLD", np.mean(kl))
    rep.add(*key, "n_points", len(y))
    rep.add(*key, "MAPE_zero_excluded", int(np.sum(~nz)))
    return rep
