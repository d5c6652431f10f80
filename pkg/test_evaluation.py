import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from data import Dataset, SplitSpec
from errors import DataValidationError, DegenerateDataError, DimensionMismatchError, RepeatFailedError
from evaluation import (
    BASELINE,
    MethodVariant,
    PriorConfig,
    SweepConfig,
    convergence_experiment,
    gaussian_mean_pair,
    input_perturbation_pair,
    linear_regression_pair,
    log_log_slope,
    monte_carlo_cv,
    run_variant,
    spearman_columns,
    spearman_rho,
    sweep,
    synthetic_source,
)
from mechanism import PrivacyBudget
from projection import Bounds, ThresholdMultipliers
from regression import FixedPrecisionPrior, posterior_fixed, predict_points
from rng import RngStream, root_stream
from suffstats import sufficient_stats

SPLIT = (0.35, 0.60, 0.05)


def _linear(n, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    return Dataset(X, X @ rng.normal(size=d) + 0.3 * rng.normal(size=n))


# =============================================================================
# SPEARMAN
# =============================================================================

def test_spearman_perfect_orderings():
    assert spearman_rho([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman_rho([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_average_ranks_for_ties():
    ra = np.array([1.5, 1.5, 3.0])
    rb = np.array([1.0, 2.0, 3.0])
    ra, rb = ra - ra.mean(), rb - rb.mean()
    expected = (ra * rb).sum() / np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    assert spearman_rho([1, 1, 2], [1, 2, 3]) == pytest.approx(expected, abs=1e-12)


def test_spearman_errors():
    with pytest.raises(DegenerateDataError):
        spearman_rho([1, 1, 1], [1, 2, 3])
    with pytest.raises(DimensionMismatchError):
        spearman_rho([1, 2], [1, 2, 3])
    with pytest.raises(DataValidationError):
        spearman_rho([1], [2])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000), st.sampled_from([np.exp, np.cbrt, lambda v: 3 * v + 7]))
def test_spearman_invariant_under_monotone_maps(seed, transform):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=25)
    b = a + rng.normal(size=25)
    assert spearman_rho(transform(a), b) == pytest.approx(spearman_rho(a, b), abs=1e-12)


def test_spearman_columns_match_scalar():
    rng = np.random.default_rng(1)
    predictions = rng.normal(size=(30, 4))
    y = rng.normal(size=30)
    expected = [spearman_rho(predictions[:, j], y) for j in range(4)]
    np.testing.assert_allclose(spearman_columns(predictions, y), expected, atol=1e-12)


def test_spearman_columns_constant_column_is_nan():
    predictions = np.column_stack([np.ones(5), np.arange(5.0)])
    out = spearman_columns(predictions, np.arange(5.0))
    assert np.isnan(out[0]) and out[1] == pytest.approx(1.0)


# =============================================================================
# METHOD VARIANTS
# =============================================================================

def _parts(seed=0):
    data = _linear(120, seed=seed)
    return data.subset(range(20)), data.subset(range(20, 100)), data.subset(range(100, 120))


def test_robust_variant_without_noise_matches_pooled_nonprivate():
    nonprivate, private, test = _parts()
    budget = PrivacyBudget.from_split(1e12, SPLIT)
    bounds = Bounds(100.0, 100.0)
    robust = run_variant(nonprivate, private, test, "robust_private_lr", budget, bounds, PriorConfig(), RngStream(1))
    clean = run_variant(nonprivate, private, test, "nonprivate_lr", budget, bounds, PriorConfig(), RngStream(1))
    np.testing.assert_allclose(robust, clean, atol=1e-5)


def test_empty_private_set_equals_baseline():
    nonprivate, _, test = _parts()
    budget = PrivacyBudget.from_split(1.0, SPLIT)
    expected = predict_points(test.inputs, posterior_fixed(sufficient_stats(nonprivate), FixedPrecisionPrior()))
    for variant in MethodVariant:
        out = run_variant(
            nonprivate, Dataset.empty(3), test, variant, budget, ThresholdMultipliers(1.0, 1.0), PriorConfig(), RngStream(2)
        )
        np.testing.assert_allclose(out, expected, atol=1e-12)


def test_nonprivate_without_pooling_ignores_private_rows():
    nonprivate, private, test = _parts()
    budget = PrivacyBudget.from_split(1.0, SPLIT)
    pooled = run_variant(nonprivate, private, test, "nonprivate_lr", budget, Bounds(1, 1), PriorConfig(), RngStream(0))
    alone = run_variant(
        nonprivate, private, test, "nonprivate_lr", budget, Bounds(1, 1), PriorConfig(), RngStream(0), pool_private=False
    )
    expected = predict_points(test.inputs, posterior_fixed(sufficient_stats(nonprivate), FixedPrecisionPrior()))
    np.testing.assert_allclose(alone, expected)
    assert not np.allclose(pooled, alone)


@pytest.mark.parametrize("variant", list(MethodVariant))
def test_variants_deterministic(variant):
    nonprivate, private, test = _parts(seed=3)
    budget = PrivacyBudget.from_split(1.0, SPLIT)
    args = (nonprivate, private, test, variant, budget, ThresholdMultipliers(1.0, 1.0), PriorConfig())
    a = run_variant(*args, RngStream(9))
    b = run_variant(*args, RngStream(9))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_gibbs_prior_config():
    nonprivate, private, test = _parts(seed=4)
    prior = PriorConfig(fit="gibbs", m=100, burn_in=20)
    out = run_variant(
        nonprivate, private, test, "robust_private_lr", PrivacyBudget.from_split(1.0, SPLIT), Bounds(2, 2), prior, RngStream(0)
    )
    assert out.shape == (test.n,)


def test_prior_config_rejects_unknown_fit():
    with pytest.raises(DataValidationError):
        PriorConfig(fit="advi")


# =============================================================================
# MONTE CARLO CROSS-VALIDATION
# =============================================================================

def _cv(source, repeats=3, variants=("robust_private_lr",), workers=1, seed=0, **kwargs):
    return monte_carlo_cv(
        source,
        repeats,
        SplitSpec(20, 10, seed),
        variants,
        PrivacyBudget.from_split(2.0, SPLIT),
        ThresholdMultipliers(1.0, 1.0),
        root_stream(seed),
        workers=workers,
        **kwargs,
    )


def test_single_repeat_has_no_std():
    result = _cv(_linear(100), repeats=1)
    assert result.repeats == 1
    assert len(result.rhos["robust_private_lr"]) == 1
    assert result.std("robust_private_lr") is None
    assert result.summary()["robust_private_lr"]["std"] is None


def test_duplicate_variants_give_identical_results():
    result = _cv(_linear(100), variants={"a": "robust_private_lr", "b": "robust_private_lr"})
    assert result.rhos["a"] == result.rhos["b"]
    assert result.summary()["a"] == result.summary()["b"]


def test_baseline_always_reported():
    result = _cv(_linear(100))
    assert BASELINE in result.rhos
    assert result.relative_improvement(BASELINE) == [0.0] * 3


def test_parallel_repeats_match_sequential():
    sequential = _cv(_linear(100), repeats=4, variants=list(MethodVariant))
    parallel = _cv(_linear(100), repeats=4, variants=list(MethodVariant), workers=3)
    assert sequential.rhos == parallel.rhos


def test_generator_source_needs_private_size():
    with pytest.raises(RepeatFailedError):
        _cv(synthetic_source(3))
    result = _cv(synthetic_source(3), n_private=50)
    assert result.config["n_private"] == 50
    assert result.config["d"] == 3


def test_failing_repeat_reports_index():
    rng = np.random.default_rng(0)
    constant = Dataset(rng.normal(size=(60, 2)), np.ones(60))
    with pytest.raises(RepeatFailedError) as err:
        _cv(constant)
    assert err.value.context["repeat"] == 0


def test_result_frame_is_tidy():
    result = _cv(_linear(100), repeats=2, variants=["robust_private_lr", "private_lr_noproj"])
    frame = result.to_frame(epsilon=2.0)
    assert set(frame.columns) == {"epsilon", "variant", "repeat", "rho", "improvement"}
    assert len(frame) == 3 * 2


@pytest.mark.slow
def test_projection_beats_rescaling_on_synthetic_data():
    def run(n_private):
        return monte_carlo_cv(
            synthetic_source(10),
            50,
            SplitSpec(100, 10, 0),
            ["robust_private_lr", "private_lr_noproj"],
            PrivacyBudget.from_split(2.0, SPLIT),
            ThresholdMultipliers(1.0, 1.0),
            root_stream(1),
            n_private=n_private,
        )

    result = run(800)
    robust = np.array(result.rhos["robust_private_lr"])
    noproj = np.array(result.rhos["private_lr_noproj"])
    pooled_se = np.sqrt((robust.var(ddof=1) + noproj.var(ddof=1)) / 50)
    assert robust.mean() - noproj.mean() > pooled_se
    # more private data helps
    assert robust.mean() > np.mean(run(100).rhos["robust_private_lr"])


# =============================================================================
# CONVERGENCE
# =============================================================================

def test_log_log_slope_exact():
    n = np.array([10.0, 100.0, 1000.0])
    assert log_log_slope(n, 3.0 / n) == pytest.approx(-1.0)


def test_convergence_grid_validation():
    pair = gaussian_mean_pair()
    with pytest.raises(DataValidationError):
        convergence_experiment(pair, [100, 1000], 5, RngStream(0))
    with pytest.raises(DataValidationError):
        convergence_experiment(pair, [100, 200, 300], 5, RngStream(0))
    with pytest.raises(DataValidationError):
        convergence_experiment(pair, [1000, 100, 10_000], 5, RngStream(0))


def test_convergence_table_shape():
    table = convergence_experiment(gaussian_mean_pair(), [100, 1000, 10_000], 20, RngStream(1))
    assert len(table.rows) == 3
    assert list(table.rows.columns) == ["n", "q05", "q25", "q50", "q75", "q95", "median"]
    assert np.isfinite(table.slope)


@pytest.mark.slow
def test_sufficient_statistic_mean_converges_at_one_over_n():
    table = convergence_experiment(gaussian_mean_pair(1, 1.0, 1.0), [10**3, 10**4, 10**5, 10**6], 200, root_stream(2))
    assert table.slope == pytest.approx(-1.0, abs=0.15)


@pytest.mark.slow
def test_input_perturbation_mean_converges_slower():
    grid = [10**3, 10**4, 10**5, 10**6]
    perturbed = convergence_experiment(input_perturbation_pair(1, 1.0, 1.0), grid, 200, root_stream(3))
    suffstat = convergence_experiment(gaussian_mean_pair(1, 1.0, 1.0), grid, 200, root_stream(3))
    # noise on every record only averages down as n^-1/2
    assert perturbed.slope == pytest.approx(-0.5, abs=0.15)
    assert perturbed.slope > suffstat.slope + 0.3


@pytest.mark.slow
def test_regression_mechanism_converges_at_one_over_n():
    table = convergence_experiment(linear_regression_pair(d=5), [10**3, 10**4, 10**5, 10**6], 100, root_stream(4))
    assert table.slope == pytest.approx(-1.0, abs=0.2)
    assert table.slope <= -0.8


# =============================================================================
# SWEEPS
# =============================================================================

def _sweep_base(**overrides):
    values = dict(repeats=2, n_test=20, split_seed=0, variants=("robust_private_lr",), bounds=ThresholdMultipliers(1.0, 1.0))
    values.update(overrides)
    return SweepConfig(**values)


def test_single_cell_sweep_equals_monte_carlo_cv():
    base = _sweep_base()
    result = sweep({"d": [3], "n_private": [60], "n_nonprivate": [10], "epsilon": [2.0]}, base, root_stream(5))
    direct = monte_carlo_cv(
        synthetic_source(3),
        2,
        SplitSpec(20, 10, 0),
        base.variants,
        PrivacyBudget.from_split(2.0, base.budget_split),
        base.bounds,
        root_stream(5),
        prior=base.prior,
        n_private=60,
    )
    assert list(result.cells) == [(3, 60, 10, 2.0)]
    assert result.cells[(3, 60, 10, 2.0)].rhos == direct.rhos


def test_sweep_product_and_frames():
    result = sweep(
        {"d": [2, 3], "n_private": [40], "n_nonprivate": [10], "epsilon": [1.0, 2.0]}, _sweep_base(), root_stream(6)
    )
    assert len(result.cells) == 4
    improvement = result.improvement_frame()
    assert len(improvement) == 4 * 2  # baseline + one variant per cell
    assert set(improvement.columns) == {"d", "n_private", "n_nonprivate", "epsilon", "variant", "improvement"}
    assert len(result.to_dict()["cells"]) == 4


def test_sweep_rejects_empty_axis():
    with pytest.raises(DataValidationError):
        sweep({"d": [], "n_private": [10], "n_nonprivate": [5], "epsilon": [1.0]}, _sweep_base(), root_stream(0))


@pytest.mark.slow
def test_more_budget_does_not_hurt():
    result = sweep(
        {"d": [10], "n_private": [400], "n_nonprivate": [10], "epsilon": [1.0, 2.0]},
        _sweep_base(repeats=30, n_test=100),
        root_stream(7),
    )
    low = np.array(result.cells[(10, 400, 10, 1.0)].rhos["robust_private_lr"])
    high = np.array(result.cells[(10, 400, 10, 2.0)].rhos["robust_private_lr"])
    assert high.mean() >= low.mean() - low.std(ddof=1) / np.sqrt(len(low))


@pytest.mark.slow
def test_small_private_sets_cost_more_in_higher_dimension():
    result = sweep(
        {"d": [2, 10], "n_private": [100, 1000], "n_nonprivate": [10], "epsilon": [2.0]},
        _sweep_base(repeats=20, n_test=100),
        root_stream(8),
    )

    def mean_rho(d, n_private):
        return np.mean(result.cells[(d, n_private, 10, 2.0)].rhos["robust_private_lr"])

    penalty = {d: mean_rho(d, 1000) - mean_rho(d, 100) for d in (2, 10)}
    assert penalty[10] > penalty[2]
