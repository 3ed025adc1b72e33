"""Hyperparameter priors.

Penalized-complexity priors are specified through tail statements
``P(sigma > sigma_o) = zeta`` and ``P(range < range_o) = zeta``. In two
dimensions the resulting densities are exponential in ``sigma`` and
exponential in ``1 / range``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "PCPrior",
    "ARPrior",
    "HyperPriorSet",
    "pc_sd_logpdf",
    "pc_range_logpdf",
    "ar_logprior",
    "alpha1_log_prior",
    "FIXED_EFFECT_PRECISION",
]

FIXED_EFFECT_PRECISION = 1e-6
_DIM = 2


@dataclass(frozen=True)
class PCPrior:
    """Tail-probability specification of a PC prior."""

    kind: str  # "sd_upper" or "range_lower"
    threshold: float
    prob: float = 0.5

    def __post_init__(self):
        if self.kind not in ("sd_upper", "range_lower"):
            raise ValueError(f"unknown PC prior kind {self.kind!r}")
        if not self.threshold > 0:
            raise ValueError("PC prior threshold must be positive")
        if not 0 < self.prob < 1:
            raise ValueError("PC prior probability must lie in (0, 1)")

    @property
    def rate(self) -> float:
        if self.kind == "sd_upper":
            return -np.log(self.prob) / self.threshold
        return -np.log(self.prob) * self.threshold ** (_DIM / 2)

    def logpdf(self, value: float) -> float:
        if self.kind == "sd_upper":
            return pc_sd_logpdf(value, self)
        return pc_range_logpdf(value, self)

    def mode_in_log_coords(self) -> float:
        """Mode of the prior density of ``log(value)``."""
        lam = self.rate
        if self.kind == "sd_upper":
            return 1.0 / lam
        return lam ** (2 / _DIM)


def pc_sd_logpdf(sigma: float, spec: PCPrior) -> float:
    """Exponential log-density with rate ``-log(zeta) / sigma_o``."""
    if spec.kind != "sd_upper":
        raise ValueError("spec is not an sd_upper PC prior")
    if not sigma > 0:
        raise ValueError(f"standard deviation must be positive, got {sigma}")
    lam = spec.rate
    return float(np.log(lam) - lam * sigma)


def pc_range_logpdf(rho: float, spec: PCPrior) -> float:
    if spec.kind != "range_lower":
        raise ValueError("spec is not a range_lower PC prior")
    if not rho > 0:
        raise ValueError(f"range must be positive, got {rho}")
    lam = spec.rate
    h = _DIM / 2
    return float(np.log(h * lam) - (h + 1) * np.log(rho) - lam * rho ** (-h))


@dataclass(frozen=True)
class ARPrior:
    """Prior on an AR(1) coefficient.

    ``mode="uniform"`` (default) is uniform on (-1, 1). ``mode="pc"`` is an
    experimental PC prior for a correlation with base model ``phi = 1``:
    exponential on ``sqrt(1 - phi)``, truncated to (-1, 1), with rate set by
    ``P(phi < threshold) = prob`` before truncation.
    """

    mode: str = "uniform"
    threshold: float = 0.5
    prob: float = 0.5

    def __post_init__(self):
        if self.mode not in ("uniform", "pc"):
            raise ValueError(f"unknown AR prior mode {self.mode!r}")

    def logpdf(self, phi: float) -> float:
        return ar_logprior(phi, self)


def ar_logprior(phi: float, spec: ARPrior | None = None) -> float:
    if not abs(phi) < 1:
        raise ValueError(f"AR coefficient must satisfy |phi| < 1, got {phi}")
    spec = ARPrior() if spec is None else spec
    if spec.mode == "uniform":
        return float(-np.log(2.0))
    # PC prior for correlation with base model phi = 1: distance sqrt(1 - phi)
    lam = -np.log(spec.prob) / np.sqrt(1.0 - spec.threshold)
    mu = np.sqrt(1.0 - phi)
    # density of mu is exponential(lam) truncated to [0, sqrt(2)]
    norm = 1.0 - np.exp(-lam * np.sqrt(2.0))
    return float(np.log(lam) - lam * mu - np.log(norm) - np.log(2.0 * mu))


def alpha1_log_prior(grid, weights=None) -> np.ndarray:
    """Normalized log prior weights over the multiplicative-bias grid."""
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or len(g) == 0:
        raise ValueError("alpha1 grid must be a non-empty 1-d sequence")
    if np.any(np.diff(g) <= 0):
        raise ValueError("alpha1 grid must be strictly increasing")
    if weights is None or (isinstance(weights, str) and weights == "uniform"):
        return np.full(len(g), -np.log(len(g)))
    w = np.asarray(weights, dtype=float)
    if w.shape != g.shape:
        raise ValueError("weights must match the grid length")
    if np.any(w <= 0):
        raise ValueError("explicit alpha1 prior weights must be positive")
    return np.log(w) - np.log(w.sum())


def _sd(t, p=0.5):
    return PCPrior("sd_upper", t, p)


def _rng(t, p=0.5):
    return PCPrior("range_lower", t, p)


@dataclass(frozen=True)
class HyperPriorSet:
    """Priors for every hyperparameter of the three model families.

    Field names follow the hyperparameter names used in ``models``:
    ``sigma_e1``, ``sigma_e2``, ``sigma1``, ``range1``, ``phi1``,
    ``sigma2``, ``range2``, ``phi2`` and the regression-calibration
    coefficient fields ``sigma_a0``, ``range_a0``, ``phi_a0``,
    ``sigma_a1``, ``range_a1``, ``phi_a1``.
    """

    sigma_e1: PCPrior = _sd(1.0)
    sigma_e2: PCPrior = _sd(1.0)
    sigma1: PCPrior = _sd(1.0)
    range1: PCPrior = _rng(1.0)
    phi1: ARPrior = ARPrior()
    sigma2: PCPrior = _sd(1.0)
    range2: PCPrior = _rng(1.0)
    phi2: ARPrior = ARPrior()
    sigma_a0: PCPrior | None = None
    range_a0: PCPrior | None = None
    phi_a0: ARPrior = ARPrior()
    sigma_a1: PCPrior = _sd(0.1)
    range_a1: PCPrior | None = None
    phi_a1: ARPrior = ARPrior()
    fixed_effect_precision: float = FIXED_EFFECT_PRECISION
    alpha1_grid: tuple = tuple(np.round(np.arange(0.5, 1.5001, 0.1), 10))
    alpha1_weights: tuple | None = None

    def __post_init__(self):
        # coefficient fields of regression calibration default to the
        # error-field (intercept) and latent-field (slope) settings
        if self.sigma_a0 is None:
            object.__setattr__(self, "sigma_a0", self.sigma2)
        if self.range_a0 is None:
            object.__setattr__(self, "range_a0", self.range2)
        if self.range_a1 is None:
            object.__setattr__(self, "range_a1", self.range1)
        if not self.fixed_effect_precision > 0:
            raise ValueError("fixed effect precision must be positive")
        alpha1_log_prior(self.alpha1_grid, self.alpha1_weights)

    def __getitem__(self, name: str):
        return getattr(self, name)

    def log_alpha1_prior(self) -> np.ndarray:
        return alpha1_log_prior(self.alpha1_grid, self.alpha1_weights)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HyperPriorSet":
        kw = {}
        names = set(cls.__dataclass_fields__)
        for k, v in d.items():
            if k not in names:
                raise KeyError(f"unknown prior key {k!r}")
            if isinstance(v, dict) and "kind" in v:
                kw[k] = PCPrior(**v)
            elif isinstance(v, dict) and "mode" in v:
                kw[k] = ARPrior(**v)
            elif k in ("alpha1_grid", "alpha1_weights") and v is not None:
                kw[k] = tuple(float(x) for x in v)
            else:
                kw[k] = v
        return cls(**kw)

    @classmethod
    def simple(
        cls,
        sigma_e1: float,
        sigma1: float,
        range1: float,
        sigma_e2: float = 1.0,
        sigma2: float = 1.0,
        range2: float | None = None,
        prob: float = 0.5,
        **kw,
    ) -> "HyperPriorSet":
        """All PC priors from thresholds with one tail probability."""
        range2 = range1 if range2 is None else range2
        return cls(
            sigma_e1=_sd(sigma_e1, prob),
            sigma_e2=_sd(sigma_e2, prob),
            sigma1=_sd(sigma1, prob),
            range1=_rng(range1, prob),
            sigma2=_sd(sigma2, prob),
            range2=_rng(range2, prob),
            **kw,
        )
