"""
Unit tests for Arellano-Bond difference GMM, its instruments and diagnostics.
"""

import numpy as np
import pytest

from dynpanel.configs import DGPConfig, ExperimentConfig
from dynpanel.estimators import anderson_hsiao
from dynpanel.exceptions import EmptyInstrumentSet, NotApplicable, SingularWeighting, TooFewPeriods, UnderIdentified
from dynpanel.gmm import (
    ar_test,
    build_instrument_matrix,
    first_step_weighting,
    gmm_estimate,
    h_matrix,
    sargan_test,
    second_step_weighting,
)
from dynpanel.montecarlo import run_experiment, simulate_dgp
from dynpanel.panel import ModelSpec, PanelDataset

AR1 = ModelSpec(dependent="y", intercept=False)


def ar_panel(n=10, t=5, alpha=0.5, seed=0, beta=()):
    config = DGPConfig(n_entities=n, n_periods=t - 1, alpha=alpha, beta=list(beta), seed=seed)
    return simulate_dgp(config)


def noise_free_panel(n=8, t=5):
    rng = np.random.default_rng(5)
    y = np.empty((n, t))
    y[:, 0] = rng.uniform(1.0, 3.0, size=n)
    for s in range(1, t):
        y[:, s] = 0.5 * y[:, s - 1]
    return PanelDataset(tuple(f"e{i}" for i in range(n)), range(t), {"y": y})


def literal_one_step(dataset):
    """Loop-by-loop one-step difference GMM for a pure AR(1) model."""
    y = dataset.matrix("y")
    n, t = y.shape
    m = (t - 1) * (t - 2) // 2
    r = t - 2
    h = 2.0 * np.eye(r) - np.eye(r, k=1) - np.eye(r, k=-1)
    middle = np.zeros((m, m))
    zx = np.zeros(m)
    zy = np.zeros(m)
    for i in range(n):
        z = np.zeros((r, m))
        dy = np.zeros(r)
        dy_lag = np.zeros(r)
        column = 0
        for j in range(r):
            period = j + 2
            for s in range(period - 1):
                z[j, column] = y[i, s]
                column += 1
            dy[j] = y[i, period] - y[i, period - 1]
            dy_lag[j] = y[i, period - 1] - y[i, period - 2]
        middle += z.T @ h @ z
        zx += z.T @ dy_lag
        zy += z.T @ dy
    a = np.linalg.inv(middle)
    return float((zx @ a @ zy) / (zx @ a @ zx))


class TestInstrumentMatrix:
    """Tests for instrument construction."""

    @pytest.mark.parametrize("n_periods", range(3, 13))
    def test_moment_count_law(self, n_periods):
        """Pure AR(1) has (T-1)(T-2)/2 columns, one per (period, lagged level) pair."""
        dataset = ar_panel(n=3, t=n_periods)
        instruments = build_instrument_matrix(dataset, AR1)
        assert instruments.moment_count == (n_periods - 1) * (n_periods - 2) // 2
        expected = [(t, t - s) for t in range(2, n_periods) for s in range(0, t - 1)]
        assert [(c.period, c.lag) for c in instruments.columns] == expected

    def test_block_structure(self):
        """Row j holds y_0 .. y_j in its own columns and zeros elsewhere."""
        dataset = ar_panel(n=2, t=5)
        z = build_instrument_matrix(dataset, AR1).block(1)
        y = dataset.matrix("y")[1]
        np.testing.assert_array_equal(z[0], [y[0], 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(z[1], [0, y[0], y[1], 0, 0, 0])
        np.testing.assert_array_equal(z[2], [0, 0, 0, y[0], y[1], y[2]])

    def test_exogenous_policies(self):
        """Column counts for the three exogenous-variable policies."""
        dataset = ar_panel(n=4, t=5, beta=[1.0])
        spec = ModelSpec(dependent="y", exogenous=["x1"])
        assert build_instrument_matrix(dataset, spec, "differenced_iv").moment_count == 6 + 3
        assert build_instrument_matrix(dataset, spec, "predetermined_iv").moment_count == 6 + 2 + 3 + 4
        assert build_instrument_matrix(dataset, spec, "strict_iv").moment_count == 6 + 3 * 5

    def test_max_lag_depth(self):
        """A depth cap keeps only the most recent levels."""
        dataset = ar_panel(n=3, t=6)
        instruments = build_instrument_matrix(dataset, AR1, max_lag_depth=1)
        assert instruments.moment_count == 4
        assert all(c.lag == 2 for c in instruments.columns)

    def test_empty_instrument_set(self):
        """Depth zero leaves no instruments for a pure AR model."""
        with pytest.raises(EmptyInstrumentSet):
            build_instrument_matrix(ar_panel(n=3, t=5), AR1, max_lag_depth=0)

    def test_orthogonal_deviation_rows(self):
        """Under deviations the first row already holds y_0."""
        dataset = ar_panel(n=3, t=5)
        instruments = build_instrument_matrix(dataset, AR1, transform="orthogonal_deviations")
        assert instruments.n_rows == 3
        assert instruments.columns[0].lag == 1

    def test_too_few_periods(self):
        """AR(1) needs three periods."""
        with pytest.raises(TooFewPeriods):
            build_instrument_matrix(PanelDataset(("a",), (0, 1), {"y": [[1.0, 2.0]]}), AR1)

    def test_h_matrix(self):
        """H is tridiagonal (2, -1) in differences and the identity under deviations."""
        np.testing.assert_array_equal(h_matrix(3), [[2, -1, 0], [-1, 2, -1], [0, -1, 2]])
        np.testing.assert_array_equal(h_matrix(3, "orthogonal_deviations"), np.eye(3))

    def test_singular_weighting_raises(self):
        """Collinear instruments make the first-step weighting singular."""
        instruments = build_instrument_matrix(noise_free_panel(), AR1)
        with pytest.raises(SingularWeighting):
            first_step_weighting(instruments, on_singular="raise")
        assert first_step_weighting(instruments, on_singular="ridge").ridge > 0.0


    def test_first_step_weighting_positive_definite(self):
        """A_N of a random full-rank instance is symmetric with positive eigenvalues."""
        dataset = ar_panel(n=50, t=6, seed=12, beta=[1.0])
        instruments = build_instrument_matrix(dataset, ModelSpec(dependent="y", exogenous=["x1"]))
        weighting = first_step_weighting(instruments)
        np.testing.assert_allclose(weighting.a_n, weighting.a_n.T, atol=1e-10 * np.abs(weighting.a_n).max())
        assert np.linalg.eigvalsh(weighting.a_n).min() > 0.0
        assert (weighting.step, weighting.ridge) == ("first", 0.0)

    def test_second_step_weighting_single_entity(self):
        """One entity gives a rank-one middle matrix."""
        dataset = ar_panel(n=1, t=5, seed=13)
        instruments = build_instrument_matrix(dataset, AR1)
        residuals = np.random.default_rng(0).standard_normal((1, instruments.n_rows))
        with pytest.raises(SingularWeighting, match="second-step"):
            second_step_weighting(instruments, residuals)

    def test_second_step_weighting_zero_residuals(self):
        """All-zero residuals leave nothing to weight, even with the ridge fallback."""
        instruments = build_instrument_matrix(ar_panel(n=30, t=5, seed=14), AR1)
        residuals = np.zeros((30, instruments.n_rows))
        with pytest.raises(SingularWeighting):
            second_step_weighting(instruments, residuals)
        with pytest.raises(SingularWeighting):
            second_step_weighting(instruments, residuals, on_singular="ridge")

    def test_second_step_weighting_positive_definite(self):
        """Residuals of a one-step fit give a symmetric positive definite weighting."""
        dataset = ar_panel(n=200, t=6, seed=15)
        one = gmm_estimate(dataset, AR1, steps="one")
        weighting = second_step_weighting(one.instruments, one.residuals)
        assert weighting.step == "second"
        np.testing.assert_allclose(weighting.a_n, weighting.a_n.T, atol=1e-10 * np.abs(weighting.a_n).max())
        assert np.linalg.eigvalsh(weighting.a_n).min() > 0.0


class TestGMMEstimate:
    """Tests for one- and two-step estimation."""

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_literal_one_step(self, seed):
        """The one-step estimate equals a loop-by-loop evaluation of the estimator."""
        dataset = ar_panel(n=10, t=5, seed=seed)
        result = gmm_estimate(dataset, AR1, steps="one")
        assert result.weighting.ridge == 0.0
        expected = literal_one_step(dataset)
        assert result.alpha == pytest.approx(expected, rel=1e-8)

    @pytest.mark.parametrize("transform", ["first_difference", "orthogonal_deviations"])
    def test_noise_free_recovery(self, transform):
        """Exact AR(1) data is recovered even though the weighting needs a ridge."""
        result = gmm_estimate(noise_free_panel(), AR1, steps="one", transform=transform)
        assert result.alpha == pytest.approx(0.5, abs=1e-8)
        assert any("ridge" in w for w in result.warnings)
        assert result.sargan is None

    @pytest.mark.parametrize("steps", ["one", "two"])
    def test_just_identified_equals_anderson_hsiao(self, steps):
        """With one moment per coefficient GMM reduces to the level-instrument IV."""
        dataset = ar_panel(n=40, t=3, seed=3)
        result = gmm_estimate(dataset, AR1, steps=steps)
        assert result.instruments.moment_count == 1
        expected = anderson_hsiao(dataset, AR1, "level_instrument").alpha
        assert result.alpha == pytest.approx(expected, rel=1e-10)
        with pytest.raises(NotApplicable):
            sargan_test(result)

    @pytest.mark.parametrize("steps", ["one", "two"])
    def test_scale_equivariance(self, steps):
        """Scaling y leaves alpha unchanged."""
        dataset = ar_panel(n=60, t=6, seed=4)
        scaled = PanelDataset(dataset.entities, dataset.periods, {"y": 10.0 * dataset.matrix("y")})
        a = gmm_estimate(dataset, AR1, steps=steps).alpha
        b = gmm_estimate(scaled, AR1, steps=steps).alpha
        assert b == pytest.approx(a, rel=1e-8)

    @pytest.mark.parametrize("steps", ["one", "two"])
    @pytest.mark.parametrize("x_policy", ["differenced_iv", "strict_iv"])
    def test_exogenous_scale_equivariance(self, steps, x_policy):
        """Scaling a regressor by c divides its coefficient by c and leaves alpha unchanged."""
        dataset = ar_panel(n=120, t=6, seed=16, beta=[0.3])
        spec = ModelSpec(dependent="y", exogenous=["x1"])
        scaled = PanelDataset(
            dataset.entities, dataset.periods, {"y": dataset.matrix("y"), "x1": 7.5 * dataset.matrix("x1")}
        )
        base = gmm_estimate(dataset, spec, steps=steps, x_policy=x_policy)
        other = gmm_estimate(scaled, spec, steps=steps, x_policy=x_policy)
        assert other.alpha == pytest.approx(base.alpha, rel=1e-8)
        assert other.coefficient("x1") == pytest.approx(base.coefficient("x1") / 7.5, rel=1e-8)

    def test_two_step_close_to_one_step(self):
        """Over seeded N=200 panels the two-step mean lies within 2 MC standard errors of one-step."""
        config = ExperimentConfig(n_entities=200, n_periods=5, replications=60, estimators=["ab1", "ab2"], seed=17)
        report = run_experiment(config)
        one, two = report.estimators["ab1"].alpha, report.estimators["ab2"].alpha
        assert abs(two.mean_estimate - one.mean_estimate) < 2 * one.mc_standard_error

    def test_two_step_criterion_not_above_one_step(self):
        """Under the second-step weighting the two-step estimate minimises the criterion."""
        dataset = ar_panel(n=80, t=6, seed=6)
        one = gmm_estimate(dataset, AR1, steps="one")
        two = gmm_estimate(dataset, AR1, steps="two")
        assert two.criterion_value <= two.criterion_at(one.params, two.weighting) + 1e-10
        assert two.step_count == 2
        assert two.method == "ab2"

    def test_sargan_equals_criterion_for_two_step(self):
        """The two-step Sargan statistic is the minimised criterion with m - k df."""
        dataset = ar_panel(n=80, t=6, seed=7)
        result = gmm_estimate(dataset, AR1, steps="two")
        assert result.sargan.statistic == pytest.approx(result.criterion_value)
        assert result.sargan.df == 10 - 1
        assert 0.0 <= result.sargan.p_value <= 1.0

    def test_under_identified(self):
        """Fewer moments than coefficients is rejected."""
        dataset = ar_panel(n=20, t=3, beta=[1.0])
        spec = ModelSpec(dependent="y", exogenous=["x1"])
        with pytest.raises(UnderIdentified):
            gmm_estimate(dataset, spec, max_lag_depth=0)

    def test_instrument_proliferation_warning(self):
        """N <= m is reported as instrument proliferation."""
        dataset = ar_panel(n=10, t=7, seed=8)
        result = gmm_estimate(dataset, AR1, steps="one")
        assert any("proliferation" in w for w in result.warnings)

    def test_exogenous_coefficients(self):
        """Coefficient names cover the lag and the regressors; covariance is symmetric."""
        dataset = ar_panel(n=200, t=6, seed=9, beta=[1.0, -0.5])
        spec = ModelSpec(dependent="y", exogenous=["x1", "x2"])
        result = gmm_estimate(dataset, spec, steps="two")
        assert result.names == ("L1.y", "x1", "x2")
        np.testing.assert_allclose(result.covariance, result.covariance.T)
        assert all(se > 0 for se in result.standard_errors.values())
        assert result.coefficient("x1") == pytest.approx(1.0, abs=0.2)


class TestSpecificationTests:
    """Tests for the AR(m) diagnostics."""

    def test_first_order_autocorrelation_detected(self):
        """Differenced iid errors show negative first-order autocorrelation."""
        dataset = ar_panel(n=500, t=7, seed=10)
        result = gmm_estimate(dataset, AR1, steps="two")
        assert result.ar_tests[1].statistic < 0
        assert result.ar_tests[1].reject()

    def test_ar2_needs_three_differenced_periods(self):
        """AR(2) is unavailable with only two differenced equations."""
        dataset = ar_panel(n=50, t=4, seed=11)
        result = gmm_estimate(dataset, AR1, steps="one")
        assert 2 not in result.ar_tests
        assert any("AR(2)" in w for w in result.warnings)
        with pytest.raises(TooFewPeriods):
            ar_test(result, 2)
