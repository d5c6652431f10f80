"""
Scoring and experiment harness.

Monte Carlo cross-validation over method variants, convergence-rate
experiments for the private estimators, and Cartesian sweeps over
(d, n_private, n_nonprivate, epsilon).
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats as sps
from tqdm import tqdm

from config import CONVERGENCE_QUANTILES, DEFAULT_SPLIT
from data import Dataset, SplitSpec, preprocess_train_test, split_dataset
from errors import DataValidationError, DegenerateDataError, DimensionMismatchError, RepeatFailedError, RobustDPError
from mechanism import (
    GaussianMeanPrior,
    PrivacyBudget,
    gaussian_mean_dp,
    gaussian_mean_input_perturbation,
    gaussian_mean_posterior,
    laplace_sample,
    perturb_stats,
    project_l1,
    release_stats,
)
from projection import Bounds, ThresholdMultipliers, project_dataset, rescale_dataset, thresholds_from_std
from regression import (
    FixedPrecisionPrior,
    GammaHyperPrior,
    gibbs_posterior,
    posterior_fixed,
    predict_averaged_many,
    predict_points,
)
from rng import RngStream, derive_stream
from suffstats import SufficientStats, combine_stats, sufficient_stats

logger = logging.getLogger(__name__)

BASELINE = "baseline"


# =============================================================================
# SPEARMAN
# =============================================================================

def spearman_rho(a, b) -> float:
    """Spearman's rho with average ranks for ties.

    Constant inputs have no ranking and raise instead of returning 0.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise DimensionMismatchError("vectors differ in length", len_a=a.size, len_b=b.size)
    if a.size < 2:
        raise DataValidationError("need at least two points for a rank correlation", n=a.size)
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateDataError("rank correlation of a constant vector is undefined")
    rho = sps.spearmanr(a, b)[0]
    return float(np.clip(rho, -1.0, 1.0))


def spearman_columns(predictions: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Rho of every column of `predictions` against `y`; NaN for constant columns."""
    ranks = sps.rankdata(predictions, axis=0)
    ranks = ranks - ranks.mean(axis=0)
    ry = sps.rankdata(y)
    ry = ry - ry.mean()
    denom = np.sqrt((ranks ** 2).sum(axis=0) * (ry ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (ranks * ry[:, None]).sum(axis=0) / denom
    return np.where(denom > 0, np.clip(rho, -1.0, 1.0), np.nan)


# =============================================================================
# METHOD VARIANTS
# =============================================================================

class MethodVariant(str, Enum):
    NONPRIVATE_LR = "nonprivate_lr"
    PRIVATE_LR_NOPROJ = "private_lr_noproj"
    ROBUST_PRIVATE_LR = "robust_private_lr"
    INPUT_PERTURBATION = "input_perturbation_gaussian_mean"


@dataclass(frozen=True)
class PriorConfig:
    fit: str = "fixed"  # "fixed" or "gibbs"
    fixed: FixedPrecisionPrior = field(default_factory=FixedPrecisionPrior)
    hyper: GammaHyperPrior = field(default_factory=GammaHyperPrior)
    m: int = 5000
    burn_in: int = 1000

    def __post_init__(self):
        if self.fit not in ("fixed", "gibbs"):
            raise DataValidationError("fit must be 'fixed' or 'gibbs'", fit=self.fit)


BoundsSource = Union[Bounds, ThresholdMultipliers]


def fit_and_predict(s: SufficientStats, X: np.ndarray, prior: PriorConfig, rng: RngStream) -> np.ndarray:
    if prior.fit == "gibbs":
        samples = gibbs_posterior(s, prior.hyper, prior.m, prior.burn_in, rng)
        return predict_averaged_many(X, samples)
    return predict_points(X, posterior_fixed(s, prior.fixed))


def resolve_bounds(private: Dataset, source: BoundsSource) -> Bounds:
    if isinstance(source, Bounds):
        return source
    return thresholds_from_std(private, source)


def _input_perturbed_stats(private: Dataset, bounds: Bounds, epsilon: float, rng: RngStream) -> SufficientStats:
    """Record-level release: project, then Laplace noise on every entry.

    One record changes by at most 2(d B_x + B_y) in L1 norm.
    """
    projected = project_dataset(private, bounds)
    scale = 2.0 * (private.d * bounds.b_x + bounds.b_y) / epsilon
    noisy = projected.replace(
        projected.inputs + laplace_sample(scale, rng.child("x"), projected.inputs.shape),
        projected.targets + laplace_sample(scale, rng.child("y"), projected.targets.shape),
    )
    s = sufficient_stats(noisy)
    return SufficientStats(s.xx, s.xy, s.yy, s.n, True)


def run_variant(
    train_nonprivate: Dataset,
    train_private: Dataset,
    test: Dataset,
    variant: MethodVariant,
    budget: PrivacyBudget,
    bounds: BoundsSource,
    prior: PriorConfig,
    rng: RngStream,
    pool_private: bool = True,
) -> np.ndarray:
    """Train one method variant and return predictions for `test.inputs`.

    nonprivate_lr treats the private rows as clean data when `pool_private`
    is set and ignores them otherwise.
    """
    variant = MethodVariant(variant)
    clean = sufficient_stats(train_nonprivate)
    test_inputs = test.inputs

    if variant == MethodVariant.NONPRIVATE_LR:
        if pool_private and train_private.n:
            clean = combine_stats(clean, sufficient_stats(train_private))
        return fit_and_predict(clean, test_inputs, prior, rng.child("fit"))

    if train_private.n == 0:
        return fit_and_predict(clean, test_inputs, prior, rng.child("fit"))

    b = resolve_bounds(train_private, bounds)
    release_rng = rng.child("release")
    if variant == MethodVariant.ROBUST_PRIVATE_LR:
        released = release_stats(train_private, b, budget, release_rng)
    elif variant == MethodVariant.PRIVATE_LR_NOPROJ:
        scaled, rescale = rescale_dataset(train_private, b)
        released = perturb_stats(sufficient_stats(scaled), b, budget, release_rng)
        nonprivate = train_nonprivate.replace(
            rescale.apply_inputs(train_nonprivate.inputs), rescale.apply_targets(train_nonprivate.targets)
        )
        clean = sufficient_stats(nonprivate)
        test_inputs = rescale.apply_inputs(test.inputs)
    else:
        released = _input_perturbed_stats(train_private, b, budget.epsilon, release_rng)

    return fit_and_predict(combine_stats(clean, released), test_inputs, prior, rng.child("fit"))


# =============================================================================
# MONTE CARLO CROSS-VALIDATION
# =============================================================================

@dataclass
class ExperimentResult:
    rhos: Dict[str, List[float]]
    config: Dict[str, Any]

    @property
    def repeats(self) -> int:
        return len(next(iter(self.rhos.values()))) if self.rhos else 0

    def mean(self, label: str) -> float:
        return float(np.mean(self.rhos[label]))

    def std(self, label: str) -> Optional[float]:
        """Standard deviation over repeats; None with a single repeat."""
        if self.repeats < 2:
            return None
        return float(np.std(self.rhos[label], ddof=1))

    def relative_improvement(self, label: str) -> List[float]:
        return [r - b for r, b in zip(self.rhos[label], self.rhos[BASELINE])]

    def summary(self) -> Dict[str, Dict[str, Optional[float]]]:
        out = {}
        for label in self.rhos:
            improvement = self.relative_improvement(label)
            out[label] = {
                "mean": self.mean(label),
                "std": self.std(label),
                "improvement": float(np.mean(improvement)),
            }
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "repeats": self.repeats,
            "rho": {k: [float(v) for v in vals] for k, vals in self.rhos.items()},
            "summary": self.summary(),
        }

    def to_frame(self, **axes: Any) -> pd.DataFrame:
        rows = []
        for label, values in self.rhos.items():
            improvement = self.relative_improvement(label)
            for r, (rho, gain) in enumerate(zip(values, improvement)):
                rows.append({**axes, "variant": label, "repeat": r, "rho": rho, "improvement": gain})
        return pd.DataFrame(rows)


Source = Union[Dataset, Callable[[int, RngStream], Dataset]]


def synthetic_source(d: int, lam: float = 1.0, lam0: float = 1.0) -> Callable[[int, RngStream], Dataset]:
    """Draw whole repeats from the auxiliary linear model (one beta per repeat)."""
    from tuning import generate_auxiliary

    def generate(n: int, rng: RngStream) -> Dataset:
        return generate_auxiliary(n, d, lam, lam0, rng)

    generate.d = d
    return generate


def _variant_labels(variants) -> Dict[str, MethodVariant]:
    if isinstance(variants, Mapping):
        return {str(k): MethodVariant(v) for k, v in variants.items()}
    return {MethodVariant(v).value: MethodVariant(v) for v in variants}


def _baseline_rho(nonprivate: Dataset, test: Dataset, prior: PriorConfig) -> float:
    # no training data at all: predictions carry no information
    if nonprivate.n == 0:
        return 0.0
    predictions = predict_points(test.inputs, posterior_fixed(sufficient_stats(nonprivate), prior.fixed))
    return spearman_rho(predictions, test.targets)


def monte_carlo_cv(
    source: Source,
    repeats: int,
    split: SplitSpec,
    variants,
    budget: PrivacyBudget,
    bounds: BoundsSource,
    rng: RngStream,
    prior: Optional[PriorConfig] = None,
    n_private: Optional[int] = None,
    preprocess: bool = True,
    pool_private: bool = True,
    workers: int = 1,
    progress: bool = False,
) -> ExperimentResult:
    """Repeated random splits; Spearman rho on the test set per variant.

    `source` is either a fixed Dataset (split anew each repeat, private part
    truncated to `n_private` if given) or a generator called with the total
    size each repeat. Preprocessing statistics come from the training rows.
    A baseline trained on the non-private rows alone is always included.
    """
    if repeats < 1:
        raise DataValidationError("repeats must be at least 1", repeats=repeats)
    prior = prior or PriorConfig()
    labels = _variant_labels(variants)

    def run_repeat(r: int) -> Dict[str, float]:
        try:
            spec = SplitSpec(split.n_test, split.n_nonprivate, derive_stream(split.seed, "repeat", r))
            if isinstance(source, Dataset):
                data = source
            else:
                if n_private is None:
                    raise DataValidationError("a generator source needs n_private")
                data = source(split.n_test + split.n_nonprivate + n_private, rng.child("data", r))
            test, nonprivate, private = split_dataset(data, spec)
            if n_private is not None and private.n > n_private:
                private = private.subset(np.arange(n_private))
            if preprocess:
                train = nonprivate.concat(private)
                train, test = preprocess_train_test(train, test)
                nonprivate = train.subset(np.arange(nonprivate.n))
                private = train.subset(np.arange(nonprivate.n, train.n))

            out = {BASELINE: _baseline_rho(nonprivate, test, prior)}
            for label, variant in labels.items():
                predictions = run_variant(
                    nonprivate,
                    private,
                    test,
                    variant,
                    budget,
                    bounds,
                    prior,
                    rng.child("variant", r, derive_stream(0, variant.value)),
                    pool_private,
                )
                out[label] = spearman_rho(predictions, test.targets)
            return out
        except RobustDPError as e:
            raise RepeatFailedError(f"repeat {r} failed: {e.message}", repeat=r, cause=e.to_dict())

    indices = range(repeats)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(run_repeat, indices), total=repeats, desc="repeats", disable=not progress))
    else:
        results = [run_repeat(r) for r in tqdm(indices, desc="repeats", disable=not progress)]

    rhos = {key: [res[key] for res in results] for key in [BASELINE, *labels]}
    config = {
        "epsilon": budget.epsilon,
        "split": list(budget.split),
        "d": getattr(source, "d", None),
        "n_test": split.n_test,
        "n_nonprivate": split.n_nonprivate,
        "n_private": n_private,
        "seed": split.seed,
        "rng_seed": rng.seed,
        "repeats": repeats,
        "fit": prior.fit,
        "bounds": _bounds_echo(bounds),
    }
    return ExperimentResult(rhos, config)


def _bounds_echo(bounds: BoundsSource) -> Dict[str, Any]:
    if isinstance(bounds, Bounds):
        return {"bounds": [bounds.b_x, bounds.b_y]}
    return {"multipliers": [bounds.omega_x, bounds.omega_y]}


# =============================================================================
# CONVERGENCE EXPERIMENTS
# =============================================================================

@dataclass
class EstimatorPair:
    """A private estimator and its non-private reference on the same data.

    `summarise` runs once per n; `private` runs once per noise seed.
    """

    name: str
    generate: Callable[[int, RngStream], Any]
    summarise: Callable[[Any], Any]
    private: Callable[[Any, RngStream], np.ndarray]
    reference: Callable[[Any], np.ndarray]


def gaussian_mean_pair(d: int = 1, b: float = 1.0, epsilon: float = 1.0, prior: Optional[GaussianMeanPrior] = None):
    prior = prior or GaussianMeanPrior.isotropic(d)

    def generate(n, rng):
        return project_l1(rng.normal((n, d)), b)

    return EstimatorPair(
        "gaussian_mean_suffstat",
        generate,
        lambda data: data,
        lambda data, rng: gaussian_mean_dp(data, b, prior, epsilon, rng),
        lambda data: gaussian_mean_posterior(data.sum(axis=0), data.shape[0], prior),
    )


def input_perturbation_pair(d: int = 1, b: float = 1.0, epsilon: float = 1.0, prior: Optional[GaussianMeanPrior] = None):
    pair = gaussian_mean_pair(d, b, epsilon, prior)
    prior = prior or GaussianMeanPrior.isotropic(d)
    pair.name = "gaussian_mean_input_perturbation"
    pair.private = lambda data, rng: gaussian_mean_input_perturbation(data, b, prior, epsilon, rng)
    return pair


def linear_regression_pair(
    d: int = 5,
    bounds: Optional[Bounds] = None,
    epsilon: float = 1.0,
    split: Sequence[float] = DEFAULT_SPLIT,
    prior: Optional[FixedPrecisionPrior] = None,
):
    bounds = bounds or Bounds(1.0, 1.0)
    prior = prior or FixedPrecisionPrior()
    budget = PrivacyBudget.from_split(epsilon, split)

    def generate(n, rng):
        from tuning import generate_auxiliary

        return project_dataset(generate_auxiliary(n, d, 1.0, 1.0, rng), bounds)

    return EstimatorPair(
        "linear_regression_suffstat",
        generate,
        sufficient_stats,
        lambda s, rng: posterior_fixed(perturb_stats(s, bounds, budget, rng), prior).mean,
        lambda s: posterior_fixed(s, prior).mean,
    )


@dataclass
class ConvergenceTable:
    name: str
    rows: pd.DataFrame
    slope: float

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "slope": self.slope, "rows": self.rows.to_dict(orient="records")}


def log_log_slope(n: Sequence[float], err: Sequence[float]) -> float:
    """Least-squares slope of log10(err) against log10(n)."""
    log_n = np.log10(np.asarray(n, dtype=float))
    log_err = np.log10(np.asarray(err, dtype=float))
    return float(sps.linregress(log_n, log_err).slope)


def convergence_experiment(
    pair: EstimatorPair,
    n_grid: Sequence[int],
    seeds_per_n: int,
    rng: RngStream,
    quantiles: Sequence[float] = CONVERGENCE_QUANTILES,
    progress: bool = False,
) -> ConvergenceTable:
    """Quantiles of ||private - reference||_1 per n, one fixed dataset per n."""
    n_grid = [int(n) for n in n_grid]
    if len(n_grid) < 3 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise DataValidationError("n_grid must be ascending with at least three points", n_grid=n_grid)
    if n_grid[-1] < 100 * n_grid[0]:
        raise DataValidationError("n_grid must span at least two decades", n_grid=n_grid)

    rows = []
    for n in tqdm(n_grid, desc=pair.name, disable=not progress):
        summary = pair.summarise(pair.generate(n, rng.child("data", n)))
        reference = pair.reference(summary)
        errors = np.array(
            [np.abs(pair.private(summary, rng.child("noise", n, k)) - reference).sum() for k in range(seeds_per_n)]
        )
        row = {"n": n}
        for q in quantiles:
            row[f"q{round(q * 100):02d}"] = float(np.quantile(errors, q))
        row["median"] = float(np.median(errors))
        rows.append(row)

    frame = pd.DataFrame(rows)
    slope = log_log_slope(frame["n"], frame["median"])
    logger.info("%s: log-log slope %.3f", pair.name, slope)
    return ConvergenceTable(pair.name, frame, slope)


# =============================================================================
# SWEEPS
# =============================================================================

SWEEP_AXES = ("d", "n_private", "n_nonprivate", "epsilon")


@dataclass
class SweepConfig:
    repeats: int = 50
    n_test: int = 100
    split_seed: int = 0
    variants: Tuple[str, ...] = (MethodVariant.ROBUST_PRIVATE_LR.value, MethodVariant.PRIVATE_LR_NOPROJ.value)
    budget_split: Tuple[float, float, float] = DEFAULT_SPLIT
    bounds: BoundsSource = ThresholdMultipliers(1.0, 1.0)
    prior: PriorConfig = field(default_factory=PriorConfig)
    preprocess: bool = True
    workers: int = 1


@dataclass
class SweepResult:
    cells: Dict[Tuple, ExperimentResult]

    def to_frame(self) -> pd.DataFrame:
        frames = [res.to_frame(**dict(zip(SWEEP_AXES, key))) for key, res in self.cells.items()]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    def improvement_frame(self) -> pd.DataFrame:
        """Mean relative improvement over the baseline per cell and variant."""
        frame = self.to_frame()
        return frame.groupby([*SWEEP_AXES, "variant"], as_index=False)["improvement"].mean()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "axes": list(SWEEP_AXES),
            "cells": [{"coords": list(key), **res.to_dict()} for key, res in self.cells.items()],
        }


def sweep(axes: Mapping[str, Sequence], base: SweepConfig, rng: RngStream, progress: bool = False) -> SweepResult:
    """Monte Carlo CV over the Cartesian product of the axes.

    All cells share `rng`, so cells differing in one axis see the same data
    and split draws wherever sizes agree.
    """
    missing = [a for a in SWEEP_AXES if not axes.get(a)]
    if missing:
        raise DataValidationError("sweep axes must be non-empty", missing=missing)

    cells: Dict[Tuple, ExperimentResult] = {}
    grid = list(itertools.product(*(axes[a] for a in SWEEP_AXES)))
    for d, n_priv, n_np, eps in tqdm(grid, desc="sweep", disable=not progress):
        cells[(d, n_priv, n_np, eps)] = monte_carlo_cv(
            synthetic_source(int(d)),
            base.repeats,
            SplitSpec(base.n_test, int(n_np), base.split_seed),
            base.variants,
            PrivacyBudget.from_split(float(eps), base.budget_split),
            base.bounds,
            rng,
            prior=base.prior,
            n_private=int(n_priv),
            preprocess=base.preprocess,
            workers=base.workers,
        )
    return SweepResult(cells)
