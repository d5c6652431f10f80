"""
Outlier projection.

Inputs and targets are clipped coordinate-wise to [-B_x, B_x] and
[-B_y, B_y]. The bounds fix the sensitivity of the released statistics, so
anything that maps data into the bounds (clipping, rescaling, user
transforms) has to be checked against them before release.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from data import Dataset
from errors import BoundsViolationError, DataValidationError, DegenerateDataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bounds:
    b_x: float
    b_y: float

    def __post_init__(self):
        for name, value in (("b_x", self.b_x), ("b_y", self.b_y)):
            if not (math.isfinite(value) and value > 0):
                raise DataValidationError(f"{name} must be positive and finite", value=value)


@dataclass(frozen=True)
class ThresholdMultipliers:
    omega_x: float
    omega_y: float

    def __post_init__(self):
        for name, value in (("omega_x", self.omega_x), ("omega_y", self.omega_y)):
            if not (math.isfinite(value) and value > 0):
                raise DataValidationError(f"{name} must be positive and finite", value=value)


def clip_scalar(v: float, b: float) -> float:
    if not b > 0:
        raise DataValidationError("clipping bound must be positive", bound=b)
    return max(-b, min(b, v))


def project_dataset(d: Dataset, bounds: Bounds) -> Dataset:
    return d.replace(
        np.clip(d.inputs, -bounds.b_x, bounds.b_x),
        np.clip(d.targets, -bounds.b_y, bounds.b_y),
    )


def count_modified(d: Dataset, bounds: Bounds) -> int:
    """Number of entries that projection would change."""
    return int((np.abs(d.inputs) > bounds.b_x).sum() + (np.abs(d.targets) > bounds.b_y).sum())


def pooled_std(values: np.ndarray) -> float:
    """Population standard deviation over every entry."""
    values = np.asarray(values, dtype=float).reshape(-1)
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def thresholds_from_std(d: Dataset, m: ThresholdMultipliers) -> Bounds:
    """B_x = omega_x * sigma_x and B_y = omega_y * sigma_y.

    sigma_x pools all input dimensions. When `d` is the private data itself
    this reads the private data outside the privacy budget.
    """
    if d.n == 0:
        raise DegenerateDataError("cannot derive thresholds from an empty dataset")
    sigma_x = pooled_std(d.inputs)
    sigma_y = pooled_std(d.targets)
    if sigma_x == 0.0 or sigma_y == 0.0:
        raise DegenerateDataError("zero standard deviation", sigma_x=sigma_x, sigma_y=sigma_y)
    return Bounds(m.omega_x * sigma_x, m.omega_y * sigma_y)


def check_within_bounds(d: Dataset, bounds: Bounds):
    worst_x = float(np.abs(d.inputs).max()) if d.inputs.size else 0.0
    worst_y = float(np.abs(d.targets).max()) if d.targets.size else 0.0
    if worst_x > bounds.b_x or worst_y > bounds.b_y:
        raise BoundsViolationError(
            "data exceed the declared bounds",
            max_abs_x=worst_x,
            max_abs_y=worst_y,
            b_x=bounds.b_x,
            b_y=bounds.b_y,
        )


def transform_hooks(
    d: Dataset,
    phi_x: Callable[[np.ndarray], np.ndarray],
    phi_y: Callable[[np.ndarray], np.ndarray],
    bounds: Bounds,
) -> Dataset:
    """Apply user maps to the inputs matrix and the target vector.

    The result must lie inside `bounds`; otherwise the privacy calibration
    no longer holds and BoundsViolationError is raised.
    """
    inputs = np.asarray(phi_x(d.inputs), dtype=float)
    targets = np.asarray(phi_y(d.targets), dtype=float)
    if inputs.shape != d.inputs.shape or targets.shape != d.targets.shape:
        raise DataValidationError("transform changed the data shape")
    out = d.replace(inputs, targets)
    check_within_bounds(out, bounds)
    return out


@dataclass(frozen=True)
class LinearRescale:
    """Per-variable min-max map sending [min, max] onto [-B, B]."""

    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: float
    y_scale: float

    def apply_inputs(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_shift) * self.x_scale

    def apply_targets(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_shift) * self.y_scale


def _min_max(values: np.ndarray, bound: float) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = values.min(axis=0), values.max(axis=0)
    half = (hi - lo) / 2.0
    scale = np.where(half > 0, bound / np.where(half > 0, half, 1.0), 1.0)
    return (hi + lo) / 2.0, scale


def fit_rescale(d: Dataset, bounds: Bounds) -> LinearRescale:
    """Fit the map from the observed range of each variable.

    The midrange goes to 0 and the half-range to B. Constant columns are
    shifted to 0 with scale 1.
    """
    if d.n == 0:
        return LinearRescale(np.zeros(d.d), np.ones(d.d), 0.0, 1.0)
    x_shift, x_scale = _min_max(d.inputs, bounds.b_x)
    y_shift, y_scale = _min_max(d.targets, bounds.b_y)
    return LinearRescale(x_shift, x_scale, float(y_shift), float(y_scale))


def rescale_dataset(d: Dataset, bounds: Bounds) -> tuple:
    """Rescale into bounds through transform_hooks; returns (dataset, map)."""
    rescale = fit_rescale(d, bounds)
    # floating point can overshoot the bound by an ulp
    out = transform_hooks(
        d,
        lambda X: np.clip(rescale.apply_inputs(X), -bounds.b_x, bounds.b_x),
        lambda y: np.clip(rescale.apply_targets(y), -bounds.b_y, bounds.b_y),
        bounds,
    )
    return out, rescale
