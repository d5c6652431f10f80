"""
Budget split and projection threshold tuning on auxiliary synthetic data.

Nothing here reads real data: auxiliary sets are drawn from the linear model
x ~ N(0, I_d), beta ~ N(0, I/lambda0), y | x ~ N(x^T beta, 1/lambda) at the
size of the private set, and every candidate is scored by Spearman's rho
between in-sample predictions and the auxiliary targets.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import (
    OMEGA_GRID,
    SPLIT_GRID_MAX_UNITS,
    SPLIT_GRID_MIN_UNITS,
    SPLIT_GRID_UNIT,
    SPLIT_SEARCH_DATASETS,
    SPLIT_SEARCH_NOISE,
    THRESHOLD_DATASETS,
    THRESHOLD_NOISE,
    TUNING_AUX_SIZE,
    TUNING_GIBBS_BURN_IN,
    TUNING_GIBBS_SAMPLES,
)
from data import Dataset
from errors import DataValidationError, DegenerateDataError
from evaluation import spearman_columns, spearman_rho
from mechanism import PrivacyBudget, laplace_sample, perturb_stats
from projection import ThresholdMultipliers, pooled_std, project_dataset, thresholds_from_std
from regression import (
    FixedPrecisionPrior,
    GammaHyperPrior,
    gibbs_posterior,
    posterior_fixed,
    posterior_means_batch,
    predict_averaged_many,
    predict_points,
)
from rng import RngStream
from suffstats import sufficient_stats

logger = logging.getLogger(__name__)

Split = Tuple[float, float, float]


@dataclass(frozen=True)
class TuningConfig:
    n_aux: int = TUNING_AUX_SIZE
    d: int = 10
    epsilon: float = 1.0
    n_datasets: int = SPLIT_SEARCH_DATASETS
    n_noise: int = SPLIT_SEARCH_NOISE
    lam: float = 1.0
    lam0: float = 1.0
    # "gibbs" scores splits with the Gamma-prior model, "fixed" uses lam/lam0
    scorer: str = "gibbs"
    gibbs_samples: int = TUNING_GIBBS_SAMPLES
    gibbs_burn_in: int = TUNING_GIBBS_BURN_IN
    omega_grid: Tuple[float, ...] = OMEGA_GRID
    progress: bool = False

    def __post_init__(self):
        if min(self.n_aux, self.d, self.n_datasets, self.n_noise) < 1:
            raise DataValidationError("tuning counts must be at least 1", config=asdict(self))
        if self.scorer not in ("gibbs", "fixed"):
            raise DataValidationError("scorer must be 'gibbs' or 'fixed'", scorer=self.scorer)

    def final(self) -> "TuningConfig":
        """Replicate counts for the final threshold search."""
        return replace(self, n_datasets=THRESHOLD_DATASETS, n_noise=THRESHOLD_NOISE)

    @property
    def prior(self) -> FixedPrecisionPrior:
        return FixedPrecisionPrior(self.lam, self.lam0)


@dataclass
class ThresholdSearchResult:
    multipliers: ThresholdMultipliers
    omega_grid: Tuple[float, ...]
    scores: np.ndarray  # (len(grid), len(grid)), rows omega_x, columns omega_y
    n_datasets: int
    n_noise: int

    def to_frame(self) -> pd.DataFrame:
        wx, wy = np.meshgrid(self.omega_grid, self.omega_grid, indexing="ij")
        return pd.DataFrame({"omega_x": wx.ravel(), "omega_y": wy.ravel(), "rho": self.scores.ravel()})


@dataclass
class SplitSearchResult:
    split: Split
    splits: List[Split]
    scores: List[float]
    multipliers: List[ThresholdMultipliers]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "p1": [s[0] for s in self.splits],
                "p2": [s[1] for s in self.splits],
                "p3": [s[2] for s in self.splits],
                "omega_x": [m.omega_x for m in self.multipliers],
                "omega_y": [m.omega_y for m in self.multipliers],
                "rho": self.scores,
            }
        )


# =============================================================================
# AUXILIARY DATA
# =============================================================================

def generate_auxiliary(n: int, d: int, lam: float, lam0: float, rng: RngStream) -> Dataset:
    """One auxiliary dataset; the sampled beta is not returned."""
    if n < 1 or d < 1:
        raise DataValidationError("auxiliary data needs n, d >= 1", n=n, d=d)
    beta = rng.normal(d) / np.sqrt(lam0)
    X = rng.normal((n, d))
    y = X @ beta + rng.normal(n) / np.sqrt(lam)
    return Dataset(X, y)


def _auxiliary_sets(cfg: TuningConfig, rng: RngStream, count: int) -> List[Dataset]:
    return [generate_auxiliary(cfg.n_aux, cfg.d, cfg.lam, cfg.lam0, rng.child("aux", i)) for i in range(count)]


# =============================================================================
# GRIDS
# =============================================================================

def budget_split_grid() -> List[Split]:
    """Every (p1, p2, p3) on the 0.05 lattice within [0.05, 0.90] summing to 1."""
    total = round(1.0 / SPLIT_GRID_UNIT)
    units = range(SPLIT_GRID_MIN_UNITS, SPLIT_GRID_MAX_UNITS + 1)
    grid = []
    for k1 in units:
        for k2 in units:
            k3 = total - k1 - k2
            if SPLIT_GRID_MIN_UNITS <= k3 <= SPLIT_GRID_MAX_UNITS:
                grid.append((k1 / total, k2 / total, k3 / total))
    return grid


def threshold_grid(omega_grid: Sequence[float] = OMEGA_GRID) -> List[Tuple[float, float]]:
    return [(wx, wy) for wx in omega_grid for wy in omega_grid]


# =============================================================================
# THRESHOLD SEARCH
# =============================================================================

def _clipped_stats_grid(aux: Dataset, omega: np.ndarray):
    """Clean statistics of the auxiliary set projected at every (omega_x, omega_y)."""
    sigma_x, sigma_y = pooled_std(aux.inputs), pooled_std(aux.targets)
    if sigma_x == 0.0 or sigma_y == 0.0:
        raise DegenerateDataError("auxiliary data has zero spread")
    bx = omega * sigma_x
    by = omega * sigma_y
    Xc = np.clip(aux.inputs[None, :, :], -bx[:, None, None], bx[:, None, None])  # (G, n, d)
    yc = np.clip(aux.targets[None, :], -by[:, None], by[:, None])  # (G, n)
    xx = np.einsum("gni,gnj->gij", Xc, Xc)
    xy = np.einsum("gni,hn->ghi", Xc, yc)
    yy = np.einsum("hn,hn->h", yc, yc)
    return bx, by, xx, xy, yy


def _threshold_scores(aux: Dataset, grid_stats, budget: PrivacyBudget, prior: FixedPrecisionPrior, rng: RngStream):
    """Rho for every grid cell under one noise replicate."""
    bx, by, xx, xy, _ = grid_stats
    g, d = bx.shape[0], aux.d
    eps = budget.epsilon
    b_xx = d * (d + 1) * bx ** 2 / (budget.p1 * eps)  # (G,)
    b_xy = 2 * d * bx[:, None] * by[None, :] / (budget.p2 * eps)  # (G, G)

    iu = np.triu_indices(d)
    unit = laplace_sample(1.0, rng, (g, g, iu[0].size + d))
    upper = unit[..., : iu[0].size] * b_xx[:, None, None]
    noise_xx = np.zeros((g, g, d, d))
    noise_xx[..., iu[0], iu[1]] = upper
    noise_xx[..., iu[1], iu[0]] = upper
    noisy_xx = xx[:, None, :, :] + noise_xx
    noisy_xy = xy + unit[..., iu[0].size:] * b_xy[..., None]

    means = posterior_means_batch(noisy_xx.reshape(g * g, d, d), noisy_xy.reshape(g * g, d), prior)
    predictions = aux.inputs @ means.T  # (n, G*G)
    return spearman_columns(predictions, aux.targets).reshape(g, g)


def search_thresholds(cfg: TuningConfig, split: Split, rng: RngStream) -> ThresholdSearchResult:
    """Score the full omega grid with the fixed-precision posterior.

    Ties go to the smaller omega_x, then the smaller omega_y.
    """
    budget = PrivacyBudget.from_split(cfg.epsilon, split)
    omega = np.asarray(cfg.omega_grid, dtype=float)
    total = np.zeros((omega.size, omega.size))
    count = np.zeros_like(total)

    for i, aux in enumerate(_auxiliary_sets(cfg, rng, cfg.n_datasets)):
        grid_stats = _clipped_stats_grid(aux, omega)
        for j in range(cfg.n_noise):
            scores = _threshold_scores(aux, grid_stats, budget, cfg.prior, rng.child("threshold-noise", i, j))
            ok = np.isfinite(scores)
            total[ok] += scores[ok]
            count[ok] += 1

    with np.errstate(invalid="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    if not np.isfinite(mean).any():
        raise DegenerateDataError("no threshold pair produced a usable score")
    best = int(np.nanargmax(mean))
    ix, iy = divmod(best, omega.size)
    multipliers = ThresholdMultipliers(float(omega[ix]), float(omega[iy]))
    return ThresholdSearchResult(multipliers, tuple(float(w) for w in omega), mean, cfg.n_datasets, cfg.n_noise)


def tune_thresholds(cfg: TuningConfig, split: Split, rng: RngStream) -> ThresholdMultipliers:
    return search_thresholds(cfg, split, rng).multipliers


# =============================================================================
# BUDGET SPLIT SEARCH
# =============================================================================

def _score_split(
    cfg: TuningConfig,
    auxes: List[Dataset],
    budget: PrivacyBudget,
    multipliers: ThresholdMultipliers,
    rng: RngStream,
) -> float:
    hyper = GammaHyperPrior()
    scores = []
    for i, aux in enumerate(auxes):
        bounds = thresholds_from_std(aux, multipliers)
        clean = sufficient_stats(project_dataset(aux, bounds))
        for j in range(cfg.n_noise):
            noise_rng = rng.child("split-noise", i, j)
            noisy = perturb_stats(clean, bounds, budget, noise_rng)
            if cfg.scorer == "gibbs":
                samples = gibbs_posterior(noisy, hyper, cfg.gibbs_samples, cfg.gibbs_burn_in, noise_rng.child("gibbs"))
                predictions = predict_averaged_many(aux.inputs, samples)
            else:
                predictions = predict_points(aux.inputs, posterior_fixed(noisy, cfg.prior))
            try:
                scores.append(spearman_rho(predictions, aux.targets))
            except DegenerateDataError:
                continue
    return float(np.mean(scores)) if scores else float("nan")


def search_budget_split(
    cfg: TuningConfig,
    multiplier_grid: Optional[Sequence[float]] = None,
    rng: Optional[RngStream] = None,
    splits: Optional[List[Split]] = None,
) -> SplitSearchResult:
    """Score every budget split, re-tuning thresholds inside each one.

    Highest mean rho wins; ties go to the larger p2, then the larger p1.
    """
    if rng is None:
        rng = RngStream(0)
    if multiplier_grid is not None:
        cfg = replace(cfg, omega_grid=tuple(multiplier_grid))
    splits = list(splits) if splits is not None else budget_split_grid()
    auxes = _auxiliary_sets(cfg, rng, cfg.n_datasets)

    scores: List[float] = []
    chosen: List[ThresholdMultipliers] = []
    for k, split in enumerate(tqdm(splits, desc="budget splits", disable=not cfg.progress)):
        budget = PrivacyBudget.from_split(cfg.epsilon, split)
        multipliers = tune_thresholds(cfg, split, rng.child("split-thresholds", k))
        scores.append(_score_split(cfg, auxes, budget, multipliers, rng.child("split-score", k)))
        chosen.append(multipliers)
        logger.debug("split %s: rho=%.4f omega=(%.1f, %.1f)", split, scores[-1], multipliers.omega_x, multipliers.omega_y)

    ranked = [(s, split[1], split[0], k) for k, (s, split) in enumerate(zip(scores, splits)) if np.isfinite(s)]
    if not ranked:
        raise DegenerateDataError("no budget split produced a usable score")
    best = max(ranked)[3]
    logger.info("Best budget split %s (rho=%.4f)", splits[best], scores[best])
    return SplitSearchResult(splits[best], splits, scores, chosen)


def tune_budget_split(
    cfg: TuningConfig, multiplier_grid: Optional[Sequence[float]] = None, rng: Optional[RngStream] = None
) -> Split:
    return search_budget_split(cfg, multiplier_grid, rng).split


# =============================================================================
# FULL PROCEDURE AND REPORT
# =============================================================================

@dataclass
class TuningReport:
    config: TuningConfig
    split_search: SplitSearchResult
    thresholds: ThresholdSearchResult
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        cfg = asdict(self.config)
        cfg["omega_grid"] = list(self.config.omega_grid)
        cfg.pop("progress", None)
        final = self.config.final()
        return {
            "config": cfg,
            "seed": self.seed,
            "split": list(self.split_search.split),
            "multipliers": [self.thresholds.multipliers.omega_x, self.thresholds.multipliers.omega_y],
            "replicates": {
                "split_search": [self.config.n_datasets, self.config.n_noise],
                "thresholds": [final.n_datasets, final.n_noise],
            },
            "split_scores": self.split_search.to_frame().to_dict(orient="records"),
            "threshold_scores": self.thresholds.to_frame().to_dict(orient="records"),
        }


def tune(cfg: TuningConfig, rng: RngStream) -> TuningReport:
    """Split search at the configured counts, then final thresholds at 20/20."""
    split_search = search_budget_split(cfg, rng=rng.child("split-search"))
    thresholds = search_thresholds(cfg.final(), split_search.split, rng.child("final-thresholds"))
    logger.info(
        "Chosen split %s, multipliers (%.1f, %.1f)",
        split_search.split,
        thresholds.multipliers.omega_x,
        thresholds.multipliers.omega_y,
    )
    return TuningReport(cfg, split_search, thresholds, rng.seed)
