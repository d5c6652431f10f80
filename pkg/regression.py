"""
Bayesian linear regression from sufficient statistics.

Two models:
  - fixed precisions (lambda, lambda0): closed-form Gaussian posterior
  - Gamma priors on both precisions: conditionally conjugate Gibbs sampler
    whose likelihood only touches (xx, xy, yy, n)

Noisy statistics can make lambda0 I + lambda xx indefinite; such matrices are
repaired by clamping eigenvalues before any solve.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from config import (
    GAMMA_A,
    GAMMA_A0,
    GAMMA_B,
    GAMMA_B0,
    GIBBS_BURN_IN,
    GIBBS_SAMPLES,
    PSD_REPAIR_REL,
    QF_FLOOR_REL,
)
from errors import DataValidationError, DegenerateDataError, DimensionMismatchError, SamplerError
from rng import RngStream
from suffstats import SufficientStats

logger = logging.getLogger(__name__)


# =============================================================================
# TYPES
# =============================================================================

@dataclass(frozen=True)
class FixedPrecisionPrior:
    lam: float = 1.0
    lam0: float = 1.0
    beta0: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.lam > 0 and self.lam0 > 0):
            raise DataValidationError("precisions must be positive", lam=self.lam, lam0=self.lam0)

    def prior_mean(self, d: int) -> np.ndarray:
        if self.beta0 is None:
            return np.zeros(d)
        beta0 = np.asarray(self.beta0, dtype=float)
        if beta0.shape != (d,):
            raise DimensionMismatchError("prior mean has the wrong dimension", expected=d, got=list(beta0.shape))
        return beta0


@dataclass(frozen=True)
class GammaHyperPrior:
    """lambda ~ Gamma(a, b), lambda0 ~ Gamma(a0, b0) with rate parameters."""

    a: float = GAMMA_A
    b: float = GAMMA_B
    a0: float = GAMMA_A0
    b0: float = GAMMA_B0

    def __post_init__(self):
        if min(self.a, self.b, self.a0, self.b0) <= 0:
            raise DataValidationError("Gamma hyperparameters must be positive")


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    precision: np.ndarray
    repaired: bool = False


@dataclass
class PosteriorSamples:
    betas: np.ndarray
    lambdas: np.ndarray
    lambda0s: np.ndarray
    repairs: int = 0

    def __post_init__(self):
        if self.betas.ndim != 2 or self.betas.shape[0] < 1:
            raise DataValidationError("need at least one posterior sample")

    @property
    def m(self) -> int:
        return self.betas.shape[0]

    @property
    def d(self) -> int:
        return self.betas.shape[1]


# =============================================================================
# PRECISION REPAIR
# =============================================================================

def repair_precision(matrix: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Clamp eigenvalues below tau = PSD_REPAIR_REL * max(1, trace/d) up to tau."""
    sym = 0.5 * (matrix + matrix.T)
    d = sym.shape[0]
    tau = PSD_REPAIR_REL * max(1.0, float(np.trace(sym)) / d)
    values, vectors = np.linalg.eigh(sym)
    if values.min() >= tau:
        return sym, False
    clamped = np.maximum(values, tau)
    repaired = (vectors * clamped) @ vectors.T
    return 0.5 * (repaired + repaired.T), True


def _factor(precision: np.ndarray):
    try:
        return linalg.cho_factor(precision, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        raise DegenerateDataError("posterior precision is singular after repair")


# =============================================================================
# FIXED PRECISION MODEL
# =============================================================================

def posterior_fixed(s: SufficientStats, prior: FixedPrecisionPrior) -> GaussianPosterior:
    """Lambda* = lam0 I + lam xx; mean solves Lambda* mu = lam xy + lam0 beta0."""
    d = s.d
    beta0 = prior.prior_mean(d)
    precision, repaired = repair_precision(prior.lam0 * np.eye(d) + prior.lam * s.xx)
    if repaired:
        logger.info("Repaired indefinite posterior precision (d=%d, n=%d)", d, s.n)
    factor = _factor(precision)
    mean = linalg.cho_solve(factor, prior.lam * s.xy + prior.lam0 * beta0)
    return GaussianPosterior(mean, precision, repaired)


def posterior_means_batch(xx: np.ndarray, xy: np.ndarray, prior: FixedPrecisionPrior) -> np.ndarray:
    """Fixed-precision posterior means for a stack of statistics.

    xx has shape (G, d, d) and xy (G, d). Uses the same eigenvalue repair as
    posterior_fixed and solves in the eigenbasis.
    """
    d = xy.shape[-1]
    beta0 = prior.prior_mean(d)
    precision = prior.lam0 * np.eye(d) + prior.lam * xx
    precision = 0.5 * (precision + np.swapaxes(precision, -1, -2))
    tau = PSD_REPAIR_REL * np.maximum(1.0, np.trace(precision, axis1=-2, axis2=-1) / d)
    values, vectors = np.linalg.eigh(precision)
    values = np.maximum(values, tau[:, None])
    rhs = prior.lam * xy + prior.lam0 * beta0
    coords = np.einsum("gji,gj->gi", vectors, rhs) / values
    return np.einsum("gij,gj->gi", vectors, coords)


def _check_dim(x: np.ndarray, d: int):
    if x.shape[-1] != d:
        raise DimensionMismatchError("input dimension does not match the model", expected=d, got=int(x.shape[-1]))


def predict_point(x: np.ndarray, p: GaussianPosterior) -> float:
    x = np.asarray(x, dtype=float)
    _check_dim(x, p.mean.shape[0])
    return float(x @ p.mean)


def predict_points(X: np.ndarray, p: GaussianPosterior) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_dim(X, p.mean.shape[0])
    return X @ p.mean


# =============================================================================
# GAMMA PRIOR MODEL (GIBBS)
# =============================================================================

def _quadratic_form(beta: np.ndarray, s: SufficientStats) -> float:
    """sum_i (y_i - x_i^T beta)^2 written with the sufficient statistics."""
    return float(beta @ s.xx @ beta - 2.0 * beta @ s.xy + s.yy)


def gibbs_posterior(
    s: SufficientStats,
    hyper: GammaHyperPrior,
    m: int = GIBBS_SAMPLES,
    burn_in: int = GIBBS_BURN_IN,
    rng: Optional[RngStream] = None,
) -> PosteriorSamples:
    """Gibbs sampling of (beta, lambda, lambda0) given the statistics.

    beta    | lambda, lambda0 ~ N(mu*, Lambda*)
    lambda  | beta ~ Gamma(a + n/2, b + qf/2), qf floored at QF_FLOOR_REL max(1, |yy|)
    lambda0 | beta ~ Gamma(a0 + d/2, b0 + beta^T beta / 2)
    """
    d = s.d
    if d < 1 or m < 1 or burn_in < 0:
        raise DataValidationError("invalid sampler configuration", d=d, m=m, burn_in=burn_in)
    if rng is None:
        rng = RngStream(0)

    qf_floor = QF_FLOOR_REL * max(1.0, abs(s.yy))
    shape_lam = hyper.a + 0.5 * s.n
    shape_lam0 = hyper.a0 + 0.5 * d
    eye = np.eye(d)

    lam = hyper.a / hyper.b
    lam0 = hyper.a0 / hyper.b0
    betas = np.empty((m, d))
    lambdas = np.empty(m)
    lambda0s = np.empty(m)
    repairs = 0

    for it in range(burn_in + m):
        precision, repaired = repair_precision(lam0 * eye + lam * s.xx)
        repairs += repaired
        chol = _factor(precision)
        mean = linalg.cho_solve(chol, lam * s.xy)
        # beta = mean + L^-T z has covariance precision^-1
        z = rng.normal(d)
        beta = mean + linalg.solve_triangular(chol[0], z, lower=True, trans="T")

        qf = _quadratic_form(beta, s)
        lam = rng.gamma(shape_lam, hyper.b + 0.5 * max(qf, qf_floor))
        lam0 = rng.gamma(shape_lam0, hyper.b0 + 0.5 * float(beta @ beta))

        if not (np.all(np.isfinite(beta)) and np.isfinite(lam) and np.isfinite(lam0) and lam > 0 and lam0 > 0):
            raise SamplerError("sampler state became non-finite", iteration=it)

        k = it - burn_in
        if k >= 0:
            betas[k] = beta
            lambdas[k] = lam
            lambda0s[k] = lam0

    if repairs:
        logger.info("Gibbs sampler repaired the precision in %d of %d iterations", repairs, burn_in + m)
    return PosteriorSamples(betas, lambdas, lambda0s, repairs)


def predict_averaged(x: np.ndarray, samples: PosteriorSamples) -> float:
    x = np.asarray(x, dtype=float)
    _check_dim(x, samples.d)
    return float(np.mean(samples.betas @ x))


def predict_averaged_many(X: np.ndarray, samples: PosteriorSamples) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_dim(X, samples.d)
    return X @ samples.betas.mean(axis=0)


# =============================================================================
# SERIALISATION
# =============================================================================

def posterior_to_dict(p: GaussianPosterior) -> Dict[str, Any]:
    d = p.mean.shape[0]
    iu = np.triu_indices(d)
    return {
        "d": int(d),
        "mean": [float(v) for v in p.mean],
        "precision": [float(v) for v in p.precision[iu]],
        "repaired": bool(p.repaired),
    }


def posterior_from_dict(payload: Dict[str, Any]) -> GaussianPosterior:
    try:
        d = int(payload["d"])
        mean = np.asarray(payload["mean"], dtype=float)
        upper = np.asarray(payload["precision"], dtype=float)
        repaired = bool(payload.get("repaired", False))
    except (KeyError, TypeError, ValueError) as e:
        raise DataValidationError(f"malformed posterior payload: {e}")
    if mean.shape != (d,) or upper.shape != (d * (d + 1) // 2,):
        raise DimensionMismatchError("posterior payload sizes disagree with d", d=d)
    iu = np.triu_indices(d)
    precision = np.zeros((d, d))
    precision[iu] = upper
    precision[(iu[1], iu[0])] = upper
    return GaussianPosterior(mean, precision, repaired)


def samples_to_frame(samples: PosteriorSamples) -> pd.DataFrame:
    frame = pd.DataFrame(samples.betas, columns=[f"beta{j}" for j in range(samples.d)])
    frame["lambda"] = samples.lambdas
    frame["lambda0"] = samples.lambda0s
    return frame


def samples_from_frame(frame: pd.DataFrame) -> PosteriorSamples:
    beta_cols = [c for c in frame.columns if str(c).startswith("beta")]
    if not beta_cols or "lambda" not in frame or "lambda0" not in frame:
        raise DataValidationError("sample table needs beta*, lambda and lambda0 columns")
    return PosteriorSamples(
        frame[beta_cols].to_numpy(dtype=float),
        frame["lambda"].to_numpy(dtype=float),
        frame["lambda0"].to_numpy(dtype=float),
    )
