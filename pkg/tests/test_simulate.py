"""Tests for dataset simulation and the experiment drivers."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import chisquare

from fanhmm import (
    CoefficientSet,
    DgpConfig,
    FitOptions,
    ModelSpec,
    ValidationError,
    benchmark_dgp,
    benchmark_model,
    benchmark_tables,
    covariate_process,
    emission_matrix,
    fit,
    generate_covariate_ar,
    initial_probs,
    intercept_benchmark_model,
    loglik_dataset,
    make_design_info,
    rng_stream,
    run_multistart_experiment,
    run_rmse_coverage_experiment,
    simulate_dataset,
    transition_matrix,
)
from fanhmm.simplex import gamma_to_eta
from fanhmm.simulate import ExperimentReport


def single_state_sure_thing():
    """S=1, M=2 model whose first category has probability 1 up to rounding."""
    design = make_design_info()
    spec = ModelSpec(
        n_states=1,
        n_categories=2,
        pi_design=design,
        a_design=design,
        b_design=design,
    )
    coeffs = CoefficientSet.zeros(spec)
    # softmax of (50, -50) is 1 minus ~4e-44, which rounds to exactly 1.0
    coeffs.eta_b[0] = gamma_to_eta(np.array([[50.0], [-50.0]]), coeffs.basis_m)
    return spec, coeffs


class TestRngStream:
    def test_same_path_replays(self):
        a = rng_stream(7, "covariate", "x").random(6)
        b = rng_stream(7, "covariate", "x").random(6)
        assert_allclose(a, b, rtol=0)

    def test_distinct_paths_decorrelate(self):
        draws = [
            rng_stream(7).random(4),
            rng_stream(7, 0).random(4),
            rng_stream(7, 1).random(4),
            rng_stream(7, "0").random(4),
            rng_stream(8).random(4),
        ]
        for i in range(len(draws)):
            for j in range(i + 1, len(draws)):
                assert not np.allclose(draws[i], draws[j])

    def test_path_element_validation(self):
        with pytest.raises(ValidationError, match="int or str"):
            rng_stream(1, 2.5)
        with pytest.raises(ValidationError, match=">= 0"):
            rng_stream(1, -3)


class TestCovariateProcess:
    def test_trend_normal_variance_at_first_period(self):
        # level_sd^2 + slope_range^2 / 3 + noise_sd^2 at time 1
        x = generate_covariate_ar(100_000, 1, rng_stream(0, "var"))
        target = 0.5**2 + 0.05**2 / 3.0 + 0.1**2
        assert abs(np.var(x[:, 0]) / target - 1.0) < 0.05

    def test_zero_slope_keeps_sequence_means_flat(self):
        x = generate_covariate_ar(200, 400, rng_stream(1, "flat"), slope_range=0.0)
        first = x[:, :200].mean(axis=1)
        second = x[:, 200:].mean(axis=1)
        # each half-mean has sd noise_sd / sqrt(200); allow five sds on the gap
        assert np.all(np.abs(first - second) < 5 * 0.1 * np.sqrt(2.0 / 200))

    def test_nonzero_slope_moves_sequence_means(self):
        x = generate_covariate_ar(200, 400, rng_stream(1, "drift"))
        gap = np.abs(x[:, 300:].mean(axis=1) - x[:, :100].mean(axis=1))
        # slopes of magnitude > 0.01 drift the halves by > 2 over 250 steps
        assert np.mean(gap > 1.0) > 0.5

    def test_bernoulli_per_sequence_constant(self):
        gen = covariate_process("bernoulli", p=0.3)
        x = gen(5000, 4, rng_stream(2, "bern"))
        assert np.all((x == 0.0) | (x == 1.0))
        assert np.all(x == x[:, [0]])
        assert abs(x[:, 0].mean() - 0.3) < 0.03

    def test_step_switches_once(self):
        gen = covariate_process("step", switch_time=3)
        x = gen(2, 5, rng_stream(3, "step"))
        assert_allclose(x, np.tile([0.0, 0.0, 1.0, 1.0, 1.0], (2, 1)), rtol=0)

    def test_unknown_names_and_params_rejected(self):
        with pytest.raises(ValidationError, match="unknown covariate process"):
            covariate_process("white_noise")
        with pytest.raises(ValidationError, match="unknown parameters"):
            covariate_process("bernoulli", q=0.2)
        with pytest.raises(ValidationError, match="switch_time"):
            covariate_process("step", switch_time=0)


class TestSimulateDataset:
    def test_sure_thing_emission_always_category_one(self):
        spec, coeffs = single_state_sure_thing()
        config = DgpConfig(spec=spec, coeffs=coeffs, n_sequences=400, n_periods=6)
        data = simulate_dataset(config)
        assert np.all(data.y == 1)
        assert np.all(data.states == 1)

    def test_same_seed_identical_panels(self):
        dgp = benchmark_dgp(n_sequences=40, n_periods=9, seed=21)
        first = simulate_dataset(dgp)
        second = simulate_dataset(dgp)
        assert np.array_equal(first.y, second.y)
        assert np.array_equal(first.states, second.states)
        assert_allclose(first.x_a, second.x_a, rtol=0)
        assert not np.array_equal(
            simulate_dataset(benchmark_dgp(40, 9, seed=22)).y, first.y
        )

    def test_single_period_marginal_matches_mixture(self):
        spec, coeffs = intercept_benchmark_model(3)
        pi_t, _, b_t = benchmark_tables(3)
        n = 100_000
        data = simulate_dataset(
            DgpConfig(spec=spec, coeffs=coeffs, n_sequences=n, n_periods=1, seed=5)
        )
        target = pi_t @ b_t
        freq = np.bincount(data.y[:, 0], minlength=5)[1:] / n
        bands = 4 * np.sqrt(target * (1 - target) / n)
        assert np.all(np.abs(freq - target) < bands)

    def test_conditional_frequencies_match_model_rows(self):
        # with the covariate pinned at zero, realized transition and emission
        # frequencies conditional on (state, previous response) must match
        # the model's rows; checked by chi-square at alpha = 0.001
        spec, coeffs = benchmark_model()
        data = simulate_dataset(
            DgpConfig(
                spec=spec,
                coeffs=coeffs,
                n_sequences=4000,
                n_periods=15,
                covariates={"x": 0.0},
                seed=13,
            )
        )
        y, z = data.y, data.states
        row = np.zeros(spec.k_a)
        row[0] = 1.0

        move_counts = np.zeros((3, 4, 3))
        emit_counts = np.zeros((3, 4, 4))
        np.add.at(emit_counts, (z[:, 0] - 1, 0, y[:, 0] - 1), 1.0)
        for t in range(1, data.t_max):
            np.add.at(
                move_counts, (z[:, t - 1] - 1, y[:, t - 1] - 1, z[:, t] - 1), 1.0
            )
            np.add.at(emit_counts, (z[:, t] - 1, y[:, t - 1] - 1, y[:, t] - 1), 1.0)

        for s in range(3):
            for prev in range(4):
                observed = move_counts[s, prev]
                expected = transition_matrix(spec, coeffs, row, prev + 1)[s]
                expected = expected * observed.sum()
                if expected.min() < 5:
                    continue
                assert chisquare(observed, expected).pvalue > 0.001
                observed = emit_counts[s, prev]
                expected = emission_matrix(spec, coeffs, row, prev + 1)[s]
                expected = expected * observed.sum()
                assert chisquare(observed, expected).pvalue > 0.001

    def test_covariates_engage_every_design(self):
        pi_design = make_design_info(covariates=("x",))
        a_design = make_design_info(covariates=("x",))
        b_design = make_design_info(covariates=("x",))
        spec = ModelSpec(
            n_states=2,
            n_categories=3,
            pi_design=pi_design,
            a_design=a_design,
            b_design=b_design,
        )
        rng = np.random.default_rng(3)
        coeffs = CoefficientSet.zeros(spec)
        values = rng.normal(size=(5, 4))
        data = simulate_dataset(
            DgpConfig(
                spec=spec,
                coeffs=coeffs,
                n_sequences=5,
                n_periods=4,
                covariates={"x": values},
                seed=1,
            )
        )
        assert_allclose(data.x_pi[:, 1], values[:, 0], rtol=0)
        assert_allclose(data.x_a[..., 1], values, rtol=0)
        assert_allclose(data.covariates["x"], values, rtol=0)

    def test_config_validation(self):
        spec, coeffs = benchmark_model()
        with pytest.raises(ValidationError, match="n_sequences"):
            DgpConfig(spec=spec, coeffs=coeffs, n_sequences=0, n_periods=3)
        with pytest.raises(ValidationError, match="n_periods"):
            DgpConfig(
                spec=spec,
                coeffs=coeffs,
                n_sequences=3,
                n_periods=0,
                covariates={"x": 0.0},
            )
        with pytest.raises(ValidationError, match="no generator for covariates"):
            DgpConfig(spec=spec, coeffs=coeffs, n_sequences=3, n_periods=3)
        bad_shape = DgpConfig(
            spec=spec,
            coeffs=coeffs,
            n_sequences=3,
            n_periods=3,
            covariates={"x": np.zeros((2, 7))},
        )
        with pytest.raises(ValidationError, match="broadcast"):
            simulate_dataset(bad_shape)
        with pytest.raises(ValidationError, match="finite"):
            simulate_dataset(
                DgpConfig(
                    spec=spec,
                    coeffs=coeffs,
                    n_sequences=3,
                    n_periods=3,
                    covariates={"x": np.nan},
                )
            )


class TestBenchmarkModels:
    def test_tables_reproduced_at_reference_inputs(self):
        for n_states in (3, 4):
            spec, coeffs = intercept_benchmark_model(n_states)
            pi_t, a_t, b_t = benchmark_tables(n_states)
            one = np.ones(1)
            assert_allclose(initial_probs(spec, coeffs, one), pi_t, atol=1e-12)
            assert_allclose(transition_matrix(spec, coeffs, one), a_t, atol=1e-12)
            assert_allclose(emission_matrix(spec, coeffs, one), b_t, atol=1e-12)
        with pytest.raises(ValidationError, match="3 or 4"):
            benchmark_tables(5)

    def test_feedback_benchmark_reference_row(self):
        spec, coeffs = benchmark_model()
        pi_t, a_t, b_t = benchmark_tables(3)
        row = np.zeros(spec.k_a)
        row[0] = 1.0
        assert_allclose(initial_probs(spec, coeffs, np.ones(1)), pi_t, atol=1e-12)
        assert_allclose(transition_matrix(spec, coeffs, row, 1), a_t, atol=1e-12)
        assert_allclose(emission_matrix(spec, coeffs, row, 1), b_t, atol=1e-12)

    def test_covariate_pushes_second_category(self):
        spec, coeffs = benchmark_model()
        base = np.zeros(spec.k_b)
        base[0] = 1.0
        treated = base.copy()
        treated[1] = 1.0
        b0 = emission_matrix(spec, coeffs, base, 1)
        b1 = emission_matrix(spec, coeffs, treated, 1)
        assert b1[0, 1] > b0[0, 1]
        assert b1[1, 1] > b0[1, 1]

    def test_previous_response_sticks(self):
        spec, coeffs = benchmark_model()
        row = np.zeros(spec.k_b)
        row[0] = 1.0
        ref = emission_matrix(spec, coeffs, row, 1)
        for m in (2, 3, 4):
            shifted = emission_matrix(spec, coeffs, row, m)
            assert np.all(shifted[:, m - 1] > ref[:, m - 1])

    def test_zero_scales_remove_all_modulation(self):
        spec, coeffs = benchmark_model(x_scale=0.0, lag_scale=0.0)
        _, a_t, b_t = benchmark_tables(3)
        row = np.zeros(spec.k_a)
        row[0] = 1.0
        treated = row.copy()
        treated[1] = 2.5
        for prev in (1, 3):
            assert_allclose(transition_matrix(spec, coeffs, treated, prev), a_t, atol=1e-12)
            assert_allclose(emission_matrix(spec, coeffs, treated, prev), b_t, atol=1e-12)


class TestMultistartExperiment:
    def test_single_replication_single_state_all_succeed(self):
        dgp = benchmark_dgp(n_sequences=40, n_periods=6, seed=2)
        report = run_multistart_experiment(
            dgp, [1], [0.0, 0.1], n_replications=1, methods=("direct", "hybrid")
        )
        assert len(report.rows) == 4
        assert all(row["success_rate"] == 1.0 for row in report.rows)

    def test_report_shape_and_determinism(self):
        dgp = benchmark_dgp(n_sequences=30, n_periods=6, seed=4)
        kwargs = dict(
            state_grid=[1, 2],
            penalty_grid=[0.1],
            n_replications=2,
            methods=("direct",),
            fit_options=FitOptions(max_iter=200),
        )
        first = run_multistart_experiment(dgp, **kwargs)
        second = run_multistart_experiment(dgp, **kwargs)
        assert len(first.rows) == 2 * 1 * 1
        assert first.drop_timing().rows == second.drop_timing().rows
        assert any(c.endswith("_seconds") for c in first.columns)
        assert not any(c.endswith("_seconds") for c in first.drop_timing().columns)

    def test_grid_validation(self):
        dgp = benchmark_dgp(n_sequences=10, n_periods=4, seed=0)
        with pytest.raises(ValidationError, match="nonempty"):
            run_multistart_experiment(dgp, [], [0.0], 1)
        with pytest.raises(ValidationError, match="n_replications"):
            run_multistart_experiment(dgp, [1], [0.0], 0)


class TestCoverageExperiment:
    def test_report_layout_with_supplied_truth(self):
        dgp = benchmark_dgp(n_sequences=25, n_periods=6, seed=6)
        truth = np.zeros((2, 4))
        report = run_rmse_coverage_experiment(
            dgp,
            [1],
            [0, 1],
            n_replications=2,
            n_boot=3,
            truth=truth,
            fit_options=FitOptions(method="direct", penalty=0.1, n_starts=1),
        )
        assert len(report.rows) == 1 * 2 * 4
        assert {row["horizon"] for row in report.rows} == {0, 1}
        assert all(row["n_used"] == 2 for row in report.rows)
        assert all(np.isfinite(row["rmse"]) for row in report.rows)
        assert all(0.0 <= row["coverage"] <= 1.0 for row in report.rows)

    def test_identical_seeds_identical_reports(self):
        dgp = benchmark_dgp(n_sequences=20, n_periods=5, seed=8)
        kwargs = dict(
            state_grid=[1],
            horizons=[1],
            n_replications=2,
            n_boot=3,
            truth=np.zeros((1, 4)),
            fit_options=FitOptions(method="direct", penalty=0.1, n_starts=1),
        )
        first = run_rmse_coverage_experiment(dgp, **kwargs)
        second = run_rmse_coverage_experiment(dgp, **kwargs)
        assert first.drop_timing().rows == second.drop_timing().rows

    def test_truth_shape_and_window_validation(self):
        dgp = benchmark_dgp(n_sequences=10, n_periods=5, seed=0)
        with pytest.raises(ValidationError, match="truth must have shape"):
            run_rmse_coverage_experiment(
                dgp, [1], [0, 1], 1, n_boot=2, truth=np.zeros((3, 4))
            )
        with pytest.raises(ValidationError, match="does not fit"):
            run_rmse_coverage_experiment(
                dgp, [1], [0], 1, n_boot=2, intervention_time=9,
                truth=np.zeros((1, 4)),
            )

    def test_truth_generation_matches_generating_model(self):
        # the computed ground truth must be insensitive to the number of
        # sequences beyond sampling noise of the covariate paths
        dgp = benchmark_dgp(n_sequences=10, n_periods=5, seed=14)
        small = run_rmse_coverage_experiment(
            dgp,
            [1],
            [0],
            n_replications=1,
            n_boot=2,
            truth_sequences=2000,
            fit_options=FitOptions(method="direct", penalty=0.1, n_starts=1),
        )
        large = run_rmse_coverage_experiment(
            dgp,
            [1],
            [0],
            n_replications=1,
            n_boot=2,
            truth_sequences=8000,
            fit_options=FitOptions(method="direct", penalty=0.1, n_starts=1),
        )
        got = np.array([row["truth"] for row in small.rows])
        want = np.array([row["truth"] for row in large.rows])
        assert_allclose(got, want, atol=0.02)


class TestExperimentReport:
    def test_rate_range_enforced(self):
        with pytest.raises(ValidationError, match="success_rate"):
            ExperimentReport(
                kind="multistart",
                columns=("success_rate",),
                rows=[{"success_rate": 1.2}],
            )
        with pytest.raises(ValidationError, match="do not match columns"):
            ExperimentReport(kind="multistart", columns=("a",), rows=[{"b": 1}])

    def test_csv_export_na_and_digits(self, tmp_path):
        report = ExperimentReport(
            kind="rmse-coverage",
            columns=("n_states", "rmse", "coverage"),
            rows=[
                {"n_states": 2, "rmse": 1.0 / 3.0, "coverage": np.nan},
            ],
        )
        path = tmp_path / "report.csv"
        report.to_csv(path)
        text = path.read_text(encoding="utf-8").splitlines()
        assert text[0] == "n_states,rmse,coverage"
        assert text[1] == "2,0.33333333333333331,NA"
        frame = report.to_frame()
        assert list(frame.columns) == ["n_states", "rmse", "coverage"]


class TestFitAgainstTruth:
    def test_truth_never_beats_the_mle(self):
        spec, coeffs = intercept_benchmark_model(3)
        data = simulate_dataset(
            DgpConfig(spec=spec, coeffs=coeffs, n_sequences=80, n_periods=10, seed=17)
        )
        at_truth = loglik_dataset(spec, coeffs, data)
        result = fit(
            spec, data, FitOptions(method="direct", n_starts=0), initial=coeffs
        )
        assert result.loglik >= at_truth - 1e-8
