"""End-to-end acceptance battery.

Each test here is one pass/fail gate on the package as a whole:
exact-likelihood and gradient checks against brute-force oracles, EM
monotonicity, intervention distributions against Monte-Carlo rollouts,
exact nulls, misspecification and coverage directions, multistart
regularization directions, parameter recovery, algebraic invariants, and
CLI reproducibility. Tolerances, seeds, and budgets are pinned; run with
``pytest tests/test_acceptance.py -v`` for one line per gate.

The misspecification study is marked ``slow`` (it runs for over an
hour); deselect it with ``-m "not slow"``.
"""

import json
import time

import numpy as np
import pytest

from fanhmm import (
    DgpConfig,
    FitOptions,
    InterventionPlan,
    ace,
    align_states,
    benchmark_dgp,
    benchmark_model,
    covariate_process,
    emission_matrix,
    estimate_do,
    fit,
    forward,
    initial_probs,
    intercept_benchmark_model,
    loglik_and_gradient,
    loglik_dataset,
    pack_params,
    permute_states,
    run_multistart_experiment,
    run_rmse_coverage_experiment,
    simulate_dataset,
    transition_matrix,
    unpack_params,
)
from fanhmm.cli import main as cli_main
from fanhmm.simplex import SumToZeroBasis

from _oracles import dataset_loglik_by_enumeration, fd_gradient, random_instance

EDGE_GRID = [(False, False), (True, False), (False, True), (True, True)]


def packed_objective(spec, dataset, penalty):
    def fun(packed):
        return loglik_dataset(spec, unpack_params(spec, packed), dataset, penalty)

    return fun


# -- 1: exact likelihood --------------------------------------------------


def test_criterion_01_likelihood_matches_enumeration():
    """Forward log-likelihood equals exhaustive enumeration on 60 instances."""
    started = time.perf_counter()
    rng = np.random.default_rng(20260819)
    worst = 0.0
    n_with_missing = 0
    for i in range(60):
        edges = EDGE_GRID[i % 4] if i < 12 else None
        spec, coeffs, dataset = random_instance(rng, force_edges=edges)
        if not dataset.observed_mask().all():
            n_with_missing += 1
        got = loglik_dataset(spec, coeffs, dataset)
        want = dataset_loglik_by_enumeration(spec, coeffs, dataset)
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - started
    print(
        f"60 instances, worst |loglik delta| = {worst:.2e}, "
        f"{n_with_missing} with missing responses, {elapsed:.1f}s"
    )
    assert worst < 1e-10
    assert n_with_missing >= 10
    assert elapsed < 60.0


# -- 2: analytical gradients ----------------------------------------------


def test_criterion_02_gradient_matches_finite_differences():
    """Analytical gradient of the penalized log-likelihood vs central differences."""
    started = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    n_checked = 0
    for i in range(24):
        spec, coeffs, dataset = random_instance(rng, force_edges=EDGE_GRID[i % 4])
        packed = pack_params(coeffs)
        for penalty in (0.0, 0.1):
            _, grad = loglik_and_gradient(spec, coeffs, dataset, penalty)
            fd = fd_gradient(packed_objective(spec, dataset, penalty), packed, 1e-5)
            denom = np.maximum(np.abs(fd), 1e-8)
            rel = float(np.max(np.abs(grad - fd) / denom)) if grad.size else 0.0
            worst = max(worst, rel)
            n_checked += 1
    elapsed = time.perf_counter() - started
    print(
        f"{n_checked} gradient checks (24 instances x 2 penalties), "
        f"worst rel err = {worst:.2e}, {elapsed:.1f}s"
    )
    assert worst < 1e-6
    assert elapsed < 60.0


# -- 3: EM monotonicity ---------------------------------------------------


def test_criterion_03_em_objective_never_decreases():
    """Every EM iteration improves the penalized log-likelihood (slack 1e-9)."""
    spec, truth = intercept_benchmark_model(3)
    worst_drop = 0.0
    longest = 0
    for rep in range(10):
        penalty = 0.1 if rep % 2 else 0.0
        dgp = DgpConfig(
            spec=spec, coeffs=truth, n_sequences=80, n_periods=10, seed=500 + rep
        )
        dataset = simulate_dataset(dgp)
        result = fit(
            spec,
            dataset,
            FitOptions(
                method="em", n_starts=2, penalty=penalty, max_em_iter=300, em_tol=1e-8
            ),
            seed=1000 + rep,
        )
        for outcome in result.starts:
            history = np.asarray(outcome.em_history)
            # a worsening M-step would have cut the history short; hitting
            # the iteration cap is fine (slow EM crawls near the optimum)
            assert history.size == outcome.n_iter + 1
            drops = np.diff(history)
            worst_drop = min(worst_drop, float(drops.min())) if drops.size else worst_drop
            longest = max(longest, history.size)
            assert np.all(drops >= -1e-9)
        recomputed = loglik_dataset(spec, result.coeffs, dataset, penalty)
        assert abs(recomputed - result.objective) < 1e-8
    print(f"10 runs x 2 starts, worst step = {worst_drop:.2e}, longest history {longest}")
    assert longest >= 5


# -- 4: interventions vs Monte-Carlo rollouts ------------------------------


def _draw_rows(rng, probs):
    u = rng.random(probs.shape[0])
    return np.minimum(
        (probs.cumsum(axis=1) < u[:, None]).sum(axis=1), probs.shape[1] - 1
    )


def _mc_counterfactual(spec, coeffs, ds, value, window_start, n_horizons, total, seed):
    """Ancestral rollouts under do(x=value), built straight from design rows."""
    from fanhmm.simplex import softmax

    n, s_n, m_n = ds.n_sequences, spec.n_states, spec.n_categories
    r = total // n
    gam_a, gam_b = coeffs.gamma_a(), coeffs.gamma_b()

    alpha0 = np.stack(
        [
            forward(spec, coeffs, ds, i, stop_after=window_start - 1).alpha_norm[-1]
            for i in range(n)
        ]
    )
    y_prev0 = ds.y[:, window_start - 2]
    assert np.all(y_prev0 >= 1)

    a_tabs, b_tabs = [], []
    for t in range(window_start, window_start + n_horizons):
        rows_a = ds.a_design.assign_covariates(ds.x_a[:, t - 1], {"x": value})
        var_a = ds.a_design.complete_all_lags(rows_a, m_n)
        a_tabs.append(softmax(np.einsum("srk,nmk->nmsr", gam_a, var_a)))
        rows_b = ds.b_design.assign_covariates(ds.x_b[:, t - 1], {"x": value})
        var_b = ds.b_design.complete_all_lags(rows_b, m_n)
        b_tabs.append(softmax(np.einsum("sck,nmk->nmsc", gam_b, var_b)))

    rng = np.random.default_rng(seed)
    idx = np.repeat(np.arange(n), r)
    u0 = rng.random(n * r)
    z = np.minimum((alpha0.cumsum(axis=1)[idx] < u0[:, None]).sum(axis=1), s_n - 1)
    y_prev = np.repeat(y_prev0, r)
    marginals = np.zeros((n_horizons, m_n))
    for k in range(n_horizons):
        z = _draw_rows(rng, a_tabs[k][idx, y_prev - 1, z])
        y = _draw_rows(rng, b_tabs[k][idx, y_prev - 1, z]) + 1
        marginals[k] = np.bincount(y - 1, minlength=m_n) / (n * r)
        y_prev = y
    return marginals


def test_criterion_04_interventions_match_mc_rollouts():
    """Intervention outcome distributions within 3 SEs of 10^6 MC rollouts."""
    started = time.perf_counter()
    window_start, n_horizons, total = 46, 5, 1_000_000
    dgp = benchmark_dgp(n_sequences=200, n_periods=50, seed=11)
    ds = simulate_dataset(dgp)
    worst = 0.0
    for value in (1.0, 0.0):
        mc = _mc_counterfactual(
            dgp.spec, dgp.coeffs, ds, value, window_start, n_horizons, total, seed=1234
        )
        se = np.sqrt(mc * (1 - mc) / total)
        for h in range(n_horizons):
            plan = InterventionPlan(
                covariates={"x": value}, time=window_start, horizon=h
            )
            exact = estimate_do(dgp.spec, dgp.coeffs, ds, plan).y_marginal
            worst = max(worst, float(np.max(np.abs(exact - mc[h]) / se[h])))
    elapsed = time.perf_counter() - started
    print(f"40 (arm, horizon, category) cells, worst |z| = {worst:.2f}, {elapsed:.0f}s")
    assert worst < 3.0
    assert elapsed < 600.0


# -- 5: exact nulls --------------------------------------------------------


def test_criterion_05_zero_covariate_coefficients_give_zero_effects():
    """With zero covariate coefficients every contrast is zero to 1e-12."""
    spec, coeffs = benchmark_model(x_scale=0.0, lag_scale=1.0)
    dgp = DgpConfig(
        spec=spec,
        coeffs=coeffs,
        n_sequences=60,
        n_periods=12,
        covariates={"x": covariate_process("trend_normal")},
        seed=42,
    )
    dataset = simulate_dataset(dgp)
    worst = 0.0
    for when in (3, 9):
        for horizon in (0, 1, 2):
            for mode in ("recurring", "atomic"):
                treated = InterventionPlan(
                    covariates={"x": 1.0}, time=when, horizon=horizon, mode=mode
                )
                control = InterventionPlan(
                    covariates={"x": 0.0}, time=when, horizon=horizon, mode=mode
                )
                result = ace(spec, coeffs, dataset, treated, control)
                worst = max(worst, float(np.max(np.abs(result.effect))))
                worst = max(
                    worst,
                    float(
                        np.max(
                            np.abs(
                                result.treated.z_marginal - result.control.z_marginal
                            )
                        )
                    ),
                    float(
                        np.max(
                            np.abs(result.treated.y_given_z - result.control.y_given_z)
                        )
                    ),
                )
    print(f"12 plans x (categories + states + joint), worst |effect| = {worst:.2e}")
    assert worst <= 1e-12


# -- 6: misspecification and coverage directions ----------------------------


@pytest.mark.slow
def test_criterion_06_misspecification_rmse_and_coverage_directions():
    """Underfitting inflates effect RMSE and breaks interval coverage."""
    started = time.perf_counter()
    dgp = benchmark_dgp(n_sequences=200, n_periods=25, seed=7, x_scale=2.0)
    main_opts = FitOptions(method="direct", penalty=0.1, n_starts=3, ftol=1e-6)
    boot_opts = FitOptions(method="direct", penalty=0.1, ftol=1e-5, max_iter=400)
    report = run_rmse_coverage_experiment(
        dgp,
        [2, 3],
        [0],
        n_replications=100,
        n_boot=50,
        fit_options=main_opts,
        bootstrap_fit_options=boot_opts,
    )
    points_only = run_rmse_coverage_experiment(
        dgp, [4], [0], n_replications=100, n_boot=0, fit_options=main_opts
    )
    rows = report.rows + points_only.rows

    def cell(s_n, category, key):
        for row in rows:
            if row["n_states"] == s_n and row["category"] == category:
                return row[key]
        raise AssertionError(f"missing row S={s_n} m={category}")

    # category 2 is where the generating model makes the state count matter
    rmse_2, rmse_3, rmse_4 = (cell(s, 2, "rmse") for s in (2, 3, 4))
    cover_2, cover_3 = cell(2, 2, "coverage"), cell(3, 2, "coverage")
    elapsed = time.perf_counter() - started
    print(
        f"RMSE cat2: S2={rmse_2:.4f} S3={rmse_3:.4f} S4={rmse_4:.4f} "
        f"(S2/S3={rmse_2 / rmse_3:.2f}, S4/S3={rmse_4 / rmse_3:.2f}); "
        f"coverage cat2: S2={cover_2:.2f} S3={cover_3:.2f}; {elapsed:.0f}s"
    )
    assert rmse_2 >= 1.5 * rmse_3
    assert rmse_4 <= 1.3 * rmse_3
    assert 0.80 <= cover_3 <= 0.97
    assert cover_2 < 0.80
    assert elapsed < 7200.0


# -- 7: multistart and regularization directions ----------------------------


def test_criterion_07_multistart_success_rate_directions():
    """Ridge penalty helps convergence; extra states hurt it."""
    started = time.perf_counter()
    spec, coeffs = intercept_benchmark_model(3)
    dgp = DgpConfig(spec=spec, coeffs=coeffs, n_sequences=250, n_periods=15, seed=6)
    report = run_multistart_experiment(
        dgp,
        state_grid=[3, 4],
        penalty_grid=[0.0, 0.1],
        n_replications=24,
        methods=("direct",),
        fit_options=FitOptions(ftol=1e-8),
    )
    rates = {
        (row["n_states"], row["penalty"]): row["success_rate"] for row in report.rows
    }
    elapsed = time.perf_counter() - started
    print(
        f"success rates: S3/lam0={rates[(3, 0.0)]:.2f} S3/lam.1={rates[(3, 0.1)]:.2f} "
        f"S4/lam0={rates[(4, 0.0)]:.2f} S4/lam.1={rates[(4, 0.1)]:.2f}; {elapsed:.0f}s"
    )
    assert rates[(3, 0.1)] >= rates[(3, 0.0)]
    assert rates[(4, 0.0)] <= rates[(3, 0.0)]
    assert rates[(4, 0.1)] <= rates[(3, 0.1)]


# -- 8: parameter recovery --------------------------------------------------


def test_criterion_08_parameter_recovery_on_intercept_model():
    """Fitting the true intercept-only model recovers all probability tables."""
    started = time.perf_counter()
    spec, truth = intercept_benchmark_model(3)
    dgp = DgpConfig(spec=spec, coeffs=truth, n_sequences=500, n_periods=25, seed=21)
    dataset = simulate_dataset(dgp)
    result = fit(
        spec,
        dataset,
        FitOptions(method="direct", n_starts=3, penalty=0.0, ftol=1e-9),
        seed=101,
    )
    aligned, _ = align_states(spec, result.coeffs, truth, dataset)

    def tables(coeffs):
        x1 = np.ones(1)
        return (
            initial_probs(spec, coeffs, x1),
            transition_matrix(spec, coeffs, x1),
            emission_matrix(spec, coeffs, x1),
        )

    worst = 0.0
    for got, want in zip(tables(aligned), tables(truth)):
        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - started
    print(f"max |table entry error| = {worst:.4f}, {elapsed:.0f}s")
    assert worst < 0.05
    assert elapsed < 300.0


# -- 9: algebraic invariants -------------------------------------------------


def test_criterion_09_algebraic_invariants():
    """Basis geometry, distribution normalization, relabeling symmetry."""
    # sum-to-zero bases are orthonormal with zero column sums
    for size in range(2, 7):
        q = SumToZeroBasis.for_dim(size).q
        assert np.max(np.abs(q.T @ q - np.eye(size - 1))) < 1e-12
        assert np.max(np.abs(q.sum(axis=0))) < 1e-12

    rng = np.random.default_rng(9)
    for _ in range(10):
        spec, coeffs, dataset = random_instance(rng)

        # probability tables are simplex rows
        x_pi = dataset.x_pi[0]
        assert abs(initial_probs(spec, coeffs, x_pi).sum() - 1.0) < 1e-12
        for y_prev in range(1, spec.n_categories + 1):
            a = transition_matrix(spec, coeffs, dataset.x_a[0, 0], y_prev)
            b = emission_matrix(spec, coeffs, dataset.x_b[0, 0], y_prev)
            for table in (a, b):
                assert table.min() >= 0.0
                assert np.max(np.abs(table.sum(axis=1) - 1.0)) < 1e-12

        # the filtered joint distribution stays normalized at every step
        res = forward(spec, coeffs, dataset, 0)
        t_len = int(dataset.lengths[0])
        assert np.max(np.abs(res.d[:t_len].sum(axis=(1, 2)) - 1.0)) < 1e-12

        # packing is lossless
        packed = pack_params(coeffs)
        assert np.array_equal(pack_params(unpack_params(spec, packed)), packed)

        if spec.n_states > 1:
            perm = rng.permutation(spec.n_states)
            # relabeling hidden states never changes the penalized loglik
            shuffled = permute_states(coeffs, perm)
            before = loglik_dataset(spec, coeffs, dataset, 0.1)
            after = loglik_dataset(spec, shuffled, dataset, 0.1)
            assert abs(before - after) < 1e-10

    # alignment recovers planted relabelings of well-separated states
    for spec, coeffs in (intercept_benchmark_model(3), benchmark_model()):
        covs = {"x": covariate_process("trend_normal")} if spec.k_b > 1 else {}
        dataset = simulate_dataset(
            DgpConfig(
                spec=spec,
                coeffs=coeffs,
                n_sequences=20,
                n_periods=8,
                covariates=covs,
                seed=13,
            )
        )
        for perm in ([2, 0, 1], [1, 2, 0], [0, 2, 1]):
            shuffled = permute_states(coeffs, np.array(perm))
            aligned, _ = align_states(spec, shuffled, coeffs, dataset)
            assert np.max(np.abs(pack_params(aligned) - pack_params(coeffs))) < 1e-10
    print("bases, simplex rows, normalization, packing, relabeling: all invariant")


# -- 10: CLI reproducibility --------------------------------------------------


def _run_cli(*argv):
    code = cli_main(list(argv))
    assert code == 0, f"CLI exited {code} for {argv}"


def _read(path):
    return path.read_bytes()


def test_criterion_10_cli_reruns_are_reproducible(tmp_path):
    """Identical config and seed give identical bytes; threads only affect speed."""
    from fanhmm import example_data_path

    example = example_data_path()
    config = {
        "format": "fanhmm-config",
        "format_version": 1,
        "data": {
            "path": str(example),
            "schema_path": str(example.parent / "workplace_panel.schema.json"),
        },
        "model": {"n_states": 2, "path": "fit1/model.json"},
        "fit": {"method": "direct", "n_starts": 2, "penalty": 0.1},
        "ace": {
            "treated": {"covariates": {"reform": 1.0}, "time": 4},
            "control": {"covariates": {"reform": 0.0}, "time": 4},
        },
        "bootstrap": {"n_boot": 4, "n_random_starts": 0},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(config))

    sim_config = {
        "format": "fanhmm-config",
        "format_version": 1,
        "model": {"benchmark": "intercept-3"},
        "simulate": {"n_sequences": 30, "n_periods": 8},
        "experiment": {
            "states": [2],
            "penalties": [0.1],
            "n_replications": 2,
            "methods": ["direct"],
        },
        "fit": {"ftol": 1e-6},
    }
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps(sim_config))

    def out(name):
        return str(tmp_path / name)

    base = ["--config", str(cfg), "--seed", "5"]
    sim_base = ["--config", str(sim_cfg), "--seed", "5"]

    _run_cli("fit", *base, "--out-dir", out("fit1"))
    _run_cli("fit", *base, "--out-dir", out("fit2"))
    _run_cli("ace", *base, "--out-dir", out("fit1"))
    _run_cli("ace", *base, "--out-dir", out("fit2a"))
    _run_cli("bootstrap", *base, "--out-dir", out("fit1"))
    _run_cli("bootstrap", *base, "--out-dir", out("fit2b"))
    _run_cli("simulate", *sim_base, "--out-dir", out("sim1"))
    _run_cli("simulate", *sim_base, "--out-dir", out("sim2"))
    _run_cli("experiment-multistart", *sim_base, "--out-dir", out("exp1"))
    _run_cli("experiment-multistart", *sim_base, "--out-dir", out("exp2"))

    pairs = [
        ("fit1/model.json", "fit2/model.json"),
        ("fit1/fit.json", "fit2/fit.json"),
        ("fit1/ace.csv", "fit2a/ace.csv"),
        ("fit1/ace.json", "fit2a/ace.json"),
        ("fit1/bootstrap.csv", "fit2b/bootstrap.csv"),
        ("fit1/bootstrap.json", "fit2b/bootstrap.json"),
        ("sim1/simulated.csv", "sim2/simulated.csv"),
        ("exp1/multistart.csv", "exp2/multistart.csv"),
    ]
    for left, right in pairs:
        assert _read(tmp_path / left) == _read(tmp_path / right), f"{left} != {right}"

    # higher thread counts reproduce single-threaded numbers to 1e-10
    _run_cli("fit", *base, "--threads", "2", "--out-dir", out("fit_mt"))
    _run_cli("bootstrap", *base, "--threads", "2", "--out-dir", out("fit_mt"))
    single = json.loads(_read(tmp_path / "fit1/model.json"))
    multi = json.loads(_read(tmp_path / "fit_mt/model.json"))
    worst = float(
        np.max(
            np.abs(
                np.asarray(single["parameters"]) - np.asarray(multi["parameters"])
            )
        )
    )
    boot_single = json.loads(_read(tmp_path / "fit1/bootstrap.json"))
    boot_multi = json.loads(_read(tmp_path / "fit_mt/bootstrap.json"))
    for key in ("point", "lower", "upper"):
        delta = np.abs(np.asarray(boot_single[key]) - np.asarray(boot_multi[key]))
        worst = max(worst, float(delta.max()))
    print(f"8 byte-identical reruns; threads=2 vs 1 worst |delta| = {worst:.2e}")
    assert worst < 1e-10
