import numpy as np
import pytest

from database import artifact_text
from errors import DataValidationError
from projection import ThresholdMultipliers
from rng import RngStream, root_stream
from tuning import (
    TuningConfig,
    budget_split_grid,
    generate_auxiliary,
    search_budget_split,
    search_thresholds,
    threshold_grid,
    tune,
    tune_budget_split,
    tune_thresholds,
)


def _small(**overrides):
    values = dict(n_aux=60, d=2, epsilon=1.0, n_datasets=1, n_noise=2, scorer="fixed", omega_grid=(0.5, 1.0, 1.5))
    values.update(overrides)
    return TuningConfig(**values)


# =============================================================================
# GRIDS AND AUXILIARY DATA
# =============================================================================

def test_budget_split_grid():
    grid = budget_split_grid()
    # compositions of 20 units into three parts of 1..18 units
    assert len(grid) == 171
    assert len(set(grid)) == 171
    for split in grid:
        assert abs(sum(split) - 1.0) < 1e-9
        assert min(split) >= 0.05 - 1e-12
        assert max(split) <= 0.90 + 1e-12
    assert any(np.allclose(split, (0.35, 0.60, 0.05)) for split in grid)


def test_threshold_grid_has_400_pairs():
    grid = threshold_grid()
    assert len(grid) == 400
    assert grid[0] == (0.1, 0.1)
    assert grid[-1] == (2.0, 2.0)


def test_generate_auxiliary_shape_and_centering():
    aux = generate_auxiliary(100_000, 3, 1.0, 1.0, RngStream(2))
    assert (aux.n, aux.d) == (100_000, 3)
    np.testing.assert_allclose(aux.inputs.mean(axis=0), 0.0, atol=0.02)


def test_generate_auxiliary_deterministic():
    a = generate_auxiliary(20, 2, 1.0, 1.0, RngStream(8))
    b = generate_auxiliary(20, 2, 1.0, 1.0, RngStream(8))
    np.testing.assert_array_equal(a.targets, b.targets)


def test_generate_auxiliary_rejects_empty():
    with pytest.raises(DataValidationError):
        generate_auxiliary(0, 2, 1.0, 1.0, RngStream(0))


def test_config_validation():
    with pytest.raises(DataValidationError):
        TuningConfig(n_datasets=0)
    with pytest.raises(DataValidationError):
        TuningConfig(scorer="advi")


def test_final_config_uses_twenty_replicates():
    final = _small().final()
    assert (final.n_datasets, final.n_noise) == (20, 20)


# =============================================================================
# THRESHOLD SEARCH
# =============================================================================

def test_search_thresholds_scores_whole_grid():
    result = search_thresholds(_small(), (0.35, 0.60, 0.05), RngStream(1))
    assert result.scores.shape == (3, 3)
    assert result.multipliers.omega_x in (0.5, 1.0, 1.5)
    assert len(result.to_frame()) == 9
    assert np.nanmax(result.scores) == pytest.approx(
        result.scores[(0.5, 1.0, 1.5).index(result.multipliers.omega_x), (0.5, 1.0, 1.5).index(result.multipliers.omega_y)]
    )


def test_search_thresholds_deterministic():
    a = tune_thresholds(_small(), (0.35, 0.60, 0.05), RngStream(3))
    b = tune_thresholds(_small(), (0.35, 0.60, 0.05), RngStream(3))
    assert a == b


def test_search_thresholds_ties_prefer_smaller_multipliers():
    # no entry is clipped at 5 or 6 sigma and the noise vanishes, so all cells tie
    cfg = _small(epsilon=1e12, omega_grid=(5.0, 6.0))
    result = search_thresholds(cfg, (0.35, 0.60, 0.05), RngStream(4))
    assert result.multipliers == ThresholdMultipliers(5.0, 5.0)


# =============================================================================
# BUDGET SPLIT SEARCH
# =============================================================================

def test_split_search_deterministic():
    splits = [(0.35, 0.60, 0.05), (0.60, 0.35, 0.05), (0.30, 0.30, 0.40)]
    a = search_budget_split(_small(), rng=RngStream(5), splits=splits)
    b = search_budget_split(_small(), rng=RngStream(5), splits=splits)
    assert a.split == b.split
    assert a.scores == b.scores
    assert a.split in splits


def test_split_search_ties_prefer_larger_p2():
    cfg = _small(epsilon=1e12, omega_grid=(5.0,))
    splits = [(0.35, 0.60, 0.05), (0.05, 0.90, 0.05), (0.50, 0.45, 0.05)]
    result = search_budget_split(cfg, rng=RngStream(6), splits=splits)
    assert result.scores[0] == result.scores[1] == result.scores[2]
    assert result.split == (0.05, 0.90, 0.05)


def test_split_search_with_gibbs_scorer():
    cfg = _small(scorer="gibbs", gibbs_samples=50, gibbs_burn_in=10, omega_grid=(1.0,))
    result = search_budget_split(cfg, rng=RngStream(7), splits=[(0.35, 0.60, 0.05), (0.60, 0.35, 0.05)])
    assert all(np.isfinite(result.scores))


def test_tune_budget_split_multiplier_grid_override():
    split = tune_budget_split(_small(), multiplier_grid=(1.0,), rng=RngStream(8))
    assert split in budget_split_grid()


@pytest.mark.slow
def test_tune_report_lists_full_grids():
    cfg = TuningConfig(n_aux=40, d=2, epsilon=1.0, n_datasets=1, n_noise=1, scorer="fixed")
    report = tune(cfg, root_stream(0).child("tune")).to_dict()
    assert len(report["split_scores"]) == 171
    assert len(report["threshold_scores"]) == 400
    assert report["replicates"] == {"split_search": [1, 1], "thresholds": [20, 20]}
    again = tune(cfg, root_stream(0).child("tune")).to_dict()
    assert artifact_text(again) == artifact_text(report)


# =============================================================================
# TUNING OUTCOMES
# =============================================================================

def test_loose_thresholds_win_without_noise():
    cfg = TuningConfig(n_aux=500, d=5, epsilon=1e12, n_datasets=3, n_noise=1, scorer="fixed", omega_grid=(0.1, 2.0))
    result = search_thresholds(cfg, (0.35, 0.60, 0.05), RngStream(10))
    assert result.scores[1, 1] >= result.scores[0, 0]


@pytest.mark.slow
def test_moderate_data_prefers_interior_thresholds():
    cfg = TuningConfig(n_aux=500, d=10, epsilon=2.0, n_datasets=5, n_noise=5, scorer="fixed")
    edges = (min(cfg.omega_grid), max(cfg.omega_grid))
    interior = 0
    for seed in range(10):
        best = tune_thresholds(cfg, (0.35, 0.60, 0.05), root_stream(seed).child("thresholds"))
        interior += best.omega_x not in edges and best.omega_y not in edges
    assert interior >= 8


@pytest.mark.slow
def test_xy_statistic_gets_largest_budget_share():
    cfg = TuningConfig(
        n_aux=500, d=10, epsilon=2.0, n_datasets=3, n_noise=5, scorer="fixed", omega_grid=(0.5, 1.0, 1.5, 2.0)
    )
    wins = 0
    for seed in range(5):
        p1, p2, p3 = tune_budget_split(cfg, rng=root_stream(seed).child("split"))
        wins += p2 > max(p1, p3)
    assert wins >= 4
