"""
Differentially private release of sufficient statistics (Laplace mechanism).

Noise scales follow from the bounded-DP sensitivities of the projected
statistics with basic composition across their free entries:

    b_xx = d(d+1) B_x^2 / (p1 eps)
    b_xy = 2 d B_x B_y / (p2 eps)
    b_yy = B_y^2 / (p3 eps)

The Gaussian-mean mechanisms at the bottom of the module are the small
models used to check consistency and efficiency empirically.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy import stats as sps

from config import MIN_BIN_COUNT
from data import Dataset
from errors import BoundsViolationError, BudgetError, DimensionMismatchError, InsufficientSamplesError
from projection import Bounds, check_within_bounds, project_dataset
from rng import RngStream, seed_commitment
from suffstats import SufficientStats, sufficient_stats, upper_to_symmetric

logger = logging.getLogger(__name__)

# slack for comparing statistics against n * bound products
_BOUND_RTOL = 1e-9


# =============================================================================
# BUDGET AND SCALES
# =============================================================================

@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    p1: float
    p2: float
    p3: float

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise BudgetError("epsilon must be positive and finite", epsilon=self.epsilon)
        shares = (self.p1, self.p2, self.p3)
        if any(not (0.0 < p < 1.0) for p in shares):
            raise BudgetError("budget shares must lie in (0, 1)", split=list(shares))
        if abs(sum(shares) - 1.0) > 1e-12:
            raise BudgetError("budget shares must sum to 1", split=list(shares), total=sum(shares))

    @property
    def split(self) -> Tuple[float, float, float]:
        return (self.p1, self.p2, self.p3)

    @classmethod
    def from_split(cls, epsilon: float, split) -> "PrivacyBudget":
        p1, p2, p3 = (float(p) for p in split)
        return cls(float(epsilon), p1, p2, p3)


@dataclass(frozen=True)
class NoiseScales:
    b_xx: float
    b_xy: float
    b_yy: float


def noise_scales(d: int, bounds: Bounds, budget: PrivacyBudget) -> NoiseScales:
    if d < 1:
        raise DimensionMismatchError("dimension must be at least 1", d=d)
    eps = budget.epsilon
    return NoiseScales(
        b_xx=d * (d + 1) * bounds.b_x ** 2 / (budget.p1 * eps),
        b_xy=2 * d * bounds.b_x * bounds.b_y / (budget.p2 * eps),
        b_yy=bounds.b_y ** 2 / (budget.p3 * eps),
    )


def xy_noise_norm_law(d: int, bounds: Bounds, budget: PrivacyBudget):
    """Law of ||delta||_1 for the xy noise: Gamma(shape d, rate 1/b_xy)."""
    scale = noise_scales(d, bounds, budget).b_xy
    return sps.gamma(a=d, scale=scale)


# =============================================================================
# LAPLACE SAMPLING
# =============================================================================

def laplace_sample(scale: float, rng: RngStream, size=None):
    """Laplace(0, scale) by inverse CDF on an open-interval uniform."""
    if not scale > 0:
        raise BudgetError("Laplace scale must be positive", scale=scale)
    u = rng.uniform_open(size) - 0.5
    draw = np.sign(u) * scale * np.log(1.0 - 2.0 * np.abs(u))
    return float(draw) if size is None else draw


# =============================================================================
# STATISTICS RELEASE
# =============================================================================

def _check_stats_within_bounds(s: SufficientStats, bounds: Bounds):
    """Necessary condition for data projected to `bounds`."""
    lim_xx = s.n * bounds.b_x ** 2 * (1 + _BOUND_RTOL)
    lim_xy = s.n * bounds.b_x * bounds.b_y * (1 + _BOUND_RTOL)
    lim_yy = s.n * bounds.b_y ** 2 * (1 + _BOUND_RTOL)
    if np.abs(s.xx).max(initial=0.0) > lim_xx or np.abs(s.xy).max(initial=0.0) > lim_xy or not (0 <= s.yy <= lim_yy):
        raise BoundsViolationError(
            "statistics are inconsistent with the certified bounds",
            n=s.n,
            b_x=bounds.b_x,
            b_y=bounds.b_y,
        )


def perturb_stats(s: SufficientStats, bounds: Bounds, budget: PrivacyBudget, rng: RngStream) -> SufficientStats:
    """Add Laplace noise to the d(d+1)/2 free entries of xx, to xy and to yy.

    Noise on xx is drawn for the upper triangle and mirrored. n is left
    unchanged. Statistics that were already perturbed are refused.
    """
    if s.noisy:
        raise BudgetError("statistics were already perturbed; releasing again would spend the budget twice")
    _check_stats_within_bounds(s, bounds)

    d = s.d
    scales = noise_scales(d, bounds, budget)
    upper_noise = laplace_sample(scales.b_xx, rng, d * (d + 1) // 2)
    xy_noise = laplace_sample(scales.b_xy, rng, d)
    yy_noise = laplace_sample(scales.b_yy, rng)

    return SufficientStats(
        s.xx + upper_to_symmetric(upper_noise, d),
        s.xy + xy_noise,
        s.yy + yy_noise,
        s.n,
        True,
    )


def release_stats(d: Dataset, bounds: Bounds, budget: PrivacyBudget, rng: RngStream) -> SufficientStats:
    """Project, certify, summarise and perturb a private dataset."""
    projected = project_dataset(d, bounds)
    check_within_bounds(projected, bounds)
    return perturb_stats(sufficient_stats(projected), bounds, budget, rng)


def budget_receipt(s: SufficientStats, bounds: Bounds, budget: PrivacyBudget, seed: int) -> Dict[str, Any]:
    return {
        "epsilon": budget.epsilon,
        "split": list(budget.split),
        "bounds": [bounds.b_x, bounds.b_y],
        "d": int(s.d),
        "n": int(s.n),
        "neighbouring": "bounded",
        "seed_commitment": seed_commitment(seed),
    }


# =============================================================================
# GAUSSIAN MEAN MECHANISMS
# =============================================================================

@dataclass(frozen=True)
class GaussianMeanPrior:
    """x_i ~ N(mu, Lambda), mu ~ N(mu0, Lambda0); Lambda's are precisions."""

    mu0: np.ndarray
    Lambda0: np.ndarray
    Lambda: np.ndarray

    @classmethod
    def isotropic(cls, d: int, lambda0: float = 1.0, lam: float = 1.0) -> "GaussianMeanPrior":
        return cls(np.zeros(d), lambda0 * np.eye(d), lam * np.eye(d))


def project_l1(data: np.ndarray, b: float) -> np.ndarray:
    """Scale rows with L1 norm above b back onto the L1 ball of radius b."""
    data = np.asarray(data, dtype=float)
    norms = np.abs(data).sum(axis=1)
    factor = np.where(norms > b, b / np.where(norms > 0, norms, 1.0), 1.0)
    return data * factor[:, None]


def gaussian_mean_posterior(total: np.ndarray, n: int, prior: GaussianMeanPrior) -> np.ndarray:
    """(Lambda0 + n Lambda)^-1 (Lambda total + Lambda0 mu0)."""
    precision = prior.Lambda0 + n * prior.Lambda
    rhs = prior.Lambda @ total + prior.Lambda0 @ prior.mu0
    return np.linalg.solve(precision, rhs)


def gaussian_mean_dp(
    data: np.ndarray, b: float, prior: GaussianMeanPrior, epsilon: float, rng: RngStream
) -> np.ndarray:
    """Posterior mean from the perturbed sum, delta_j ~ Laplace(0, 2bd/eps)."""
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    if n == 0:
        return np.array(prior.mu0, dtype=float)
    d = data.shape[1]
    total = project_l1(data, b).sum(axis=0)
    noise = laplace_sample(2 * b * d / epsilon, rng, d)
    return gaussian_mean_posterior(total + noise, n, prior)


def gaussian_mean_input_perturbation(
    data: np.ndarray, b: float, prior: GaussianMeanPrior, epsilon: float, rng: RngStream
) -> np.ndarray:
    """Posterior mean after adding Laplace(0, 2bd/eps) to every data entry."""
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    if n == 0:
        return np.array(prior.mu0, dtype=float)
    d = data.shape[1]
    noisy = project_l1(data, b) + laplace_sample(2 * b * d / epsilon, rng, (n, d))
    return gaussian_mean_posterior(noisy.sum(axis=0), n, prior)


def gaussian_mean_error_bound(n: int, d: int, b: float, epsilon: float, q: float, c: float = 1.0) -> float:
    """q-quantile of the stochastic bound (c/n) * Gamma(d, rate eps/(2bd))."""
    return c / n * float(sps.gamma(a=d, scale=2 * b * d / epsilon).ppf(q))


# =============================================================================
# EMPIRICAL DP CHECK
# =============================================================================

Release = Callable[[RngStream, int], np.ndarray]


def yy_release(d: Dataset, bounds: Bounds, epsilon: float, scale_factor: float = 1.0) -> Release:
    """Scalar release of sum y^2 with the whole budget on it.

    `scale_factor` below 1 under-noises the release on purpose.
    """
    yy = float(np.sum(np.clip(d.targets, -bounds.b_y, bounds.b_y) ** 2))
    scale = scale_factor * bounds.b_y ** 2 / epsilon

    def release(rng: RngStream, size: int) -> np.ndarray:
        return yy + laplace_sample(scale, rng, size)

    return release


def dp_ratio_check(
    release_a: Release,
    release_b: Release,
    epsilon: float,
    bins: int,
    n_samples: int,
    rng: RngStream,
    min_count: int = MIN_BIN_COUNT,
) -> float:
    """Worst |log p_a/p_b| over equal-mass histogram bins.

    A statistical smoke test of the e^eps ratio bound, not a proof. Bins with
    fewer than `min_count` samples from either release are skipped.
    """
    if bins < 1 or n_samples < bins * min_count:
        raise InsufficientSamplesError(
            "not enough samples to fill the bins",
            n_samples=n_samples,
            bins=bins,
            min_count=min_count,
        )
    a = np.asarray(release_a(rng.child("a"), n_samples), dtype=float)
    b = np.asarray(release_b(rng.child("b"), n_samples), dtype=float)
    edges = np.quantile(np.concatenate([a, b]), np.linspace(0, 1, bins + 1)[1:-1])
    count_a = np.bincount(np.searchsorted(edges, a, side="right"), minlength=bins)
    count_b = np.bincount(np.searchsorted(edges, b, side="right"), minlength=bins)

    usable = (count_a >= min_count) & (count_b >= min_count)
    if not usable.any():
        raise InsufficientSamplesError("no bin reached the minimum count", min_count=min_count)
    worst = float(np.max(np.abs(np.log(count_a[usable] / count_b[usable]))))
    if worst > epsilon:
        logger.warning("Observed log-ratio %.3f exceeds epsilon %.3f", worst, epsilon)
    return worst
