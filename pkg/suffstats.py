"""
Sufficient statistics of linear regression.

(sum x x^T, sum x y, sum y^2, n) is all the regression models need from the
data and the only thing released across the privacy barrier.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from config import COMPENSATED_SUM_MIN_ROWS
from data import Dataset
from errors import DataValidationError, DimensionMismatchError


@dataclass(frozen=True)
class SufficientStats:
    xx: np.ndarray
    xy: np.ndarray
    yy: float
    n: int
    noisy: bool = False

    @property
    def d(self) -> int:
        return self.xy.shape[0]

    @classmethod
    def zeros(cls, d: int) -> "SufficientStats":
        return cls(np.zeros((d, d)), np.zeros(d), 0.0, 0, False)


def upper_to_symmetric(upper: np.ndarray, d: int) -> np.ndarray:
    """Build a symmetric matrix from its row-major upper triangle."""
    iu = np.triu_indices(d)
    out = np.zeros((d, d))
    out[iu] = upper
    out[(iu[1], iu[0])] = upper
    return out


def _column_products_sum(a: np.ndarray, b: np.ndarray, exact: bool) -> float:
    if exact:
        return math.fsum((a * b).tolist())
    return float(np.dot(a, b))


def sufficient_stats(d: Dataset) -> SufficientStats:
    """Exact sums over the dataset; only the upper triangle of xx is computed."""
    X, y = d.inputs, d.targets
    dim = d.d
    if d.n == 0:
        return SufficientStats.zeros(dim)

    exact = d.n > COMPENSATED_SUM_MIN_ROWS
    iu = np.triu_indices(dim)
    if exact:
        upper = np.array([_column_products_sum(X[:, i], X[:, j], True) for i, j in zip(*iu)])
    else:
        upper = (X.T @ X)[iu]
    xy = np.array([_column_products_sum(X[:, j], y, exact) for j in range(dim)])
    yy = _column_products_sum(y, y, exact)
    return SufficientStats(upper_to_symmetric(upper, dim), xy, yy, d.n, False)


def combine_stats(a: SufficientStats, b: SufficientStats) -> SufficientStats:
    if a.d != b.d:
        raise DimensionMismatchError("cannot combine statistics of different dimension", d_a=a.d, d_b=b.d)
    return SufficientStats(a.xx + b.xx, a.xy + b.xy, a.yy + b.yy, a.n + b.n, a.noisy or b.noisy)


# =============================================================================
# WIRE FORMAT
# =============================================================================

def stats_to_dict(s: SufficientStats) -> Dict[str, Any]:
    """Flat JSON object; xx is sent as its row-major upper triangle.

    n travels in the clear: neighbouring datasets have equal size.
    """
    iu = np.triu_indices(s.d)
    return {
        "d": int(s.d),
        "n": int(s.n),
        "noisy": bool(s.noisy),
        "xx": [float(v) for v in s.xx[iu]],
        "xy": [float(v) for v in s.xy],
        "yy": float(s.yy),
    }


def stats_from_dict(payload: Dict[str, Any]) -> SufficientStats:
    try:
        d = int(payload["d"])
        upper = np.asarray(payload["xx"], dtype=float)
        xy = np.asarray(payload["xy"], dtype=float)
        yy = float(payload["yy"])
        n = int(payload["n"])
        noisy = bool(payload["noisy"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataValidationError(f"malformed statistics payload: {e}")
    if upper.shape != (d * (d + 1) // 2,) or xy.shape != (d,):
        raise DimensionMismatchError("statistics payload sizes disagree with d", d=d)
    return SufficientStats(upper_to_symmetric(upper, d), xy, yy, n, noisy)
