"""Tests for interventional distributions, alignment, and the bootstrap."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

import fanhmm.causal as causal_module
from _oracles import enumerate_joint_last
from fanhmm.causal import (
    InterventionPlan,
    ace,
    align_states,
    bootstrap_ci,
    estimate_do,
)
from fanhmm.design import make_design_info
from fanhmm.errors import UnsupportedCaseError, ValidationError
from fanhmm.estimation import FitOptions, fit
from fanhmm.model import (
    MISSING,
    CoefficientSet,
    ModelSpec,
    PanelDataset,
    pack_params,
    permute_states,
    unpack_params,
)


def covariate_spec(s=2, m=3, lag_a=True, lag_b=True):
    return ModelSpec(
        n_states=s,
        n_categories=m,
        pi_design=make_design_info(covariates=["x"]),
        a_design=make_design_info(
            covariates=["x"], n_categories=m, include_lag=lag_a
        ),
        b_design=make_design_info(
            covariates=["x"], n_categories=m, include_lag=lag_b
        ),
    )


def covariate_panel(rng, spec, n, t, x=None):
    x = rng.normal(0.0, 1.0, (n, t)) if x is None else np.broadcast_to(x, (n, t))
    raw = {"x": np.asarray(x, dtype=float)}
    y = rng.integers(1, spec.n_categories + 1, (n, t))
    return PanelDataset(
        y=y,
        lengths=np.full(n, t),
        x_pi=spec.pi_design.assemble({"x": raw["x"][:, 0]}, (n,)),
        x_a=spec.a_design.assemble(raw, (n, t)),
        x_b=spec.b_design.assemble(raw, (n, t)),
        pi_design=spec.pi_design,
        a_design=spec.a_design,
        b_design=spec.b_design,
        n_categories=spec.n_categories,
    )


def random_coeffs(rng, spec, sd=0.7):
    return unpack_params(spec, rng.normal(0.0, sd, spec.n_params))


class TestInterventionPlan:
    def test_window_arithmetic(self):
        plan = InterventionPlan({"x": 1.0}, time=46, horizon=4)
        assert plan.outcome_time == 50
        assert plan.masked_times == (46, 47, 48, 49)
        assert plan.assigned_times == (46, 47, 48, 49, 50)
        atomic = InterventionPlan({"x": 1.0}, time=46, horizon=4, mode="atomic")
        assert atomic.assigned_times == (46,)
        assert atomic.masked_times == plan.masked_times

    def test_zero_horizon_masks_nothing(self):
        plan = InterventionPlan({"x": 0.0}, time=5)
        assert plan.masked_times == ()
        assert plan.assigned_times == (5,)

    def test_invalid_plans_rejected(self):
        with pytest.raises(ValidationError):
            InterventionPlan({}, time=1)
        with pytest.raises(ValidationError):
            InterventionPlan({"x": np.nan}, time=1)
        with pytest.raises(ValidationError):
            InterventionPlan({"x": 1.0}, time=0)
        with pytest.raises(ValidationError):
            InterventionPlan({"x": 1.0}, time=1, horizon=-1)
        with pytest.raises(ValidationError):
            InterventionPlan({"x": 1.0}, time=1, mode="pulse")

    def test_atomic_needs_exogenous_covariates(self):
        with pytest.raises(UnsupportedCaseError):
            InterventionPlan(
                {"x": 1.0}, time=2, mode="atomic", covariate_autocorrelation=True
            )
        # recurring assignments overwrite the window, so the flag is fine
        InterventionPlan(
            {"x": 1.0}, time=2, mode="recurring", covariate_autocorrelation=True
        )


class TestEstimateDo:
    def test_assigning_observed_values_reproduces_the_filter(self):
        rng = np.random.default_rng(0)
        spec = covariate_spec()
        data = covariate_panel(rng, spec, 6, 5, x=0.4)
        coeffs = random_coeffs(rng, spec)
        plan = InterventionPlan({"x": 0.4}, time=3, horizon=0)
        est = estimate_do(spec, coeffs, data, plan)
        from fanhmm.inference import forward

        want = np.mean(
            [forward(spec, coeffs, data, i).d[2] for i in range(6)], axis=0
        )
        assert_allclose(est.joint, want, atol=1e-12)
        assert_allclose(est.joint.sum(), 1.0, atol=1e-12)
        assert_allclose(est.y_marginal, est.joint.sum(axis=0), atol=0)
        assert_allclose(est.z_marginal, est.joint.sum(axis=1), atol=0)

    @pytest.mark.parametrize("mode", ["recurring", "atomic"])
    def test_matches_enumeration(self, mode):
        rng = np.random.default_rng(1)
        spec = covariate_spec()
        data = covariate_panel(rng, spec, 3, 5)
        coeffs = random_coeffs(rng, spec)
        plan = InterventionPlan({"x": 0.8}, time=2, horizon=2, mode=mode)
        est = estimate_do(spec, coeffs, data, plan)

        joints = []
        for i in range(3):
            t_out = plan.outcome_time
            y = data.y[i, :t_out].copy()
            for tm in plan.masked_times:
                y[tm - 1] = MISSING
            x_a = data.x_a[i, :t_out].copy()
            x_b = data.x_b[i, :t_out].copy()
            for tm in plan.assigned_times:
                x_a[tm - 1] = spec.a_design.assign_covariates(x_a[tm - 1], {"x": 0.8})
                x_b[tm - 1] = spec.b_design.assign_covariates(x_b[tm - 1], {"x": 0.8})
            joints.append(
                enumerate_joint_last(spec, coeffs, y, data.x_pi[i], x_a, x_b)
            )
        assert_allclose(est.joint, np.mean(joints, axis=0), rtol=1e-10, atol=1e-12)

    def test_intervening_at_time_one_reaches_the_initial_distribution(self):
        rng = np.random.default_rng(2)
        spec = covariate_spec(lag_a=True, lag_b=False)
        data = covariate_panel(rng, spec, 4, 4)
        coeffs = random_coeffs(rng, spec)
        plan = InterventionPlan({"x": 1.5}, time=1, horizon=1)
        est = estimate_do(spec, coeffs, data, plan)
        joints = []
        for i in range(4):
            y = data.y[i, :2].copy()
            y[0] = MISSING
            x_pi = spec.pi_design.assign_covariates(data.x_pi[i], {"x": 1.5})
            x_a = data.x_a[i, :2].copy()
            x_b = data.x_b[i, :2].copy()
            for tm in (1, 2):
                x_a[tm - 1] = spec.a_design.assign_covariates(x_a[tm - 1], {"x": 1.5})
                x_b[tm - 1] = spec.b_design.assign_covariates(x_b[tm - 1], {"x": 1.5})
            joints.append(enumerate_joint_last(spec, coeffs, y, x_pi, x_a, x_b))
        assert_allclose(est.joint, np.mean(joints, axis=0), rtol=1e-10, atol=1e-12)

    def test_window_at_time_one_with_lagged_emissions_rejected(self):
        rng = np.random.default_rng(3)
        spec = covariate_spec(lag_b=True)
        data = covariate_panel(rng, spec, 3, 4)
        coeffs = random_coeffs(rng, spec)
        plan = InterventionPlan({"x": 1.0}, time=1, horizon=1)
        with pytest.raises(UnsupportedCaseError):
            estimate_do(spec, coeffs, data, plan)

    def test_short_sequences_dropped_only_when_allowed(self):
        rng = np.random.default_rng(4)
        spec = covariate_spec()
        data = covariate_panel(rng, spec, 5, 6)
        data.lengths[2] = 3
        data.y[2, 3:] = MISSING
        coeffs = random_coeffs(rng, spec)
        plan = InterventionPlan({"x": 0.0}, time=3, horizon=2)
        with pytest.raises(ValidationError, match="allow_truncation"):
            estimate_do(spec, coeffs, data, plan)
        est = estimate_do(spec, coeffs, data, plan, allow_truncation=True)
        assert est.n_excluded == 1
        assert est.n_used == 4
        with pytest.raises(ValidationError):
            estimate_do(
                spec, coeffs, data,
                InterventionPlan({"x": 0.0}, time=7, horizon=2),
                allow_truncation=True,
            )

    def test_unknown_covariate_rejected(self):
        rng = np.random.default_rng(5)
        spec = covariate_spec()
        data = covariate_panel(rng, spec, 3, 4)
        coeffs = random_coeffs(rng, spec)
        with pytest.raises(ValidationError, match="no design"):
            estimate_do(
                spec, coeffs, data, InterventionPlan({"w": 1.0}, time=2)
            )


class TestAce:
    def test_null_effect_is_exactly_zero(self):
        rng = np.random.default_rng(6)
        spec = covariate_spec()
        data = covariate_panel(rng, spec, 8, 6)
        coeffs = random_coeffs(rng, spec)
        x_col_a = spec.a_design.column_index("x")
        x_col_b = spec.b_design.column_index("x")
        x_col_pi = spec.pi_design.column_index("x")
        coeffs.eta_pi[:, x_col_pi] = 0.0
        coeffs.eta_a[:, :, x_col_a] = 0.0
        coeffs.eta_b[:, :, x_col_b] = 0.0
        # lag interactions with x do not exist in this design, so zeroing
        # the main columns removes every path from x to the outcome
        result = ace(
            spec, coeffs, data,
            InterventionPlan({"x": 1.0}, time=2, horizon=3),
            InterventionPlan({"x": 0.0}, time=2, horizon=3),
        )
        assert np.all(result.effect == 0.0)

    def test_effect_sums_to_zero_and_points_the_right_way(self):
        rng = np.random.default_rng(7)
        spec = covariate_spec(lag_a=False, lag_b=False)
        data = covariate_panel(rng, spec, 10, 6)
        coeffs = CoefficientSet.zeros(spec)
        x_col = spec.b_design.column_index("x")
        # x pushes emissions of every state toward category 2
        q = coeffs.basis_m.q
        target = np.log([0.05, 0.9, 0.05])
        for s in range(spec.n_states):
            coeffs.eta_b[s, :, x_col] = q.T @ (target - target.mean())
        result = ace(
            spec, coeffs, data,
            InterventionPlan({"x": 2.0}, time=3, horizon=1),
            InterventionPlan({"x": -2.0}, time=3, horizon=1),
        )
        assert_allclose(result.effect.sum(), 0.0, atol=1e-12)
        assert result.effect[1] > 0.2
        assert result.effect[0] < 0.0 and result.effect[2] < 0.0

    def test_mismatched_windows_rejected(self):
        rng = np.random.default_rng(8)
        spec = covariate_spec()
        data = covariate_panel(rng, spec, 3, 5)
        coeffs = random_coeffs(rng, spec)
        with pytest.raises(ValidationError):
            ace(
                spec, coeffs, data,
                InterventionPlan({"x": 1.0}, time=2, horizon=1),
                InterventionPlan({"x": 0.0}, time=2, horizon=2),
            )


class TestAlignStates:
    def test_recovers_a_planted_permutation_exhaustively(self):
        rng = np.random.default_rng(9)
        spec = covariate_spec(s=3)
        data = covariate_panel(rng, spec, 6, 5)
        coeffs = random_coeffs(rng, spec, sd=1.0)
        perm = np.array([2, 0, 1])
        shuffled = permute_states(coeffs, perm)
        aligned, found = align_states(spec, shuffled, coeffs, data)
        assert_allclose(pack_params(aligned), pack_params(coeffs), atol=1e-10)
        assert_allclose(
            pack_params(permute_states(shuffled, found)),
            pack_params(coeffs),
            atol=1e-10,
        )

    def test_recovers_a_planted_permutation_with_many_states(self):
        rng = np.random.default_rng(10)
        spec = ModelSpec(
            n_states=4,
            n_categories=5,
            pi_design=make_design_info(),
            a_design=make_design_info(),
            b_design=make_design_info(),
        )
        data = PanelDataset(
            y=rng.integers(1, 6, (5, 4)),
            lengths=np.full(5, 4),
            x_pi=np.ones((5, 1)),
            x_a=np.ones((5, 4, 1)),
            x_b=np.ones((5, 4, 1)),
            pi_design=spec.pi_design,
            a_design=spec.a_design,
            b_design=spec.b_design,
            n_categories=5,
        )
        coeffs = random_coeffs(rng, spec, sd=1.5)
        perm = np.array([3, 1, 0, 2])
        shuffled = permute_states(coeffs, perm)
        aligned, _ = align_states(spec, shuffled, coeffs, data)
        assert_allclose(pack_params(aligned), pack_params(coeffs), atol=1e-10)

    def test_single_state_identity(self):
        rng = np.random.default_rng(11)
        spec = covariate_spec(s=1, lag_a=False, lag_b=False)
        data = covariate_panel(rng, spec, 3, 4)
        coeffs = random_coeffs(rng, spec)
        aligned, perm = align_states(spec, coeffs, coeffs, data)
        assert perm.tolist() == [0]
        assert_allclose(pack_params(aligned), pack_params(coeffs), atol=0)


class TestBootstrap:
    def small_problem(self):
        rng = np.random.default_rng(12)
        spec = covariate_spec(s=1, m=3, lag_a=False, lag_b=False)
        data = covariate_panel(rng, spec, 12, 5)
        fitted = fit(spec, data, FitOptions(n_starts=1), seed=0).coeffs
        treat = InterventionPlan({"x": 1.0}, time=2, horizon=1)
        control = InterventionPlan({"x": 0.0}, time=2, horizon=1)
        return spec, data, fitted, treat, control

    def test_deterministic_and_well_shaped(self):
        spec, data, fitted, treat, control = self.small_problem()
        kwargs = dict(n_boot=8, level=0.8, seed=123, n_random_starts=0)
        first = bootstrap_ci(spec, data, fitted, treat, control, **kwargs)
        second = bootstrap_ci(spec, data, fitted, treat, control, **kwargs)
        assert_allclose(first.draws, second.draws, atol=0)
        assert first.draws.shape == (8, 3)
        assert first.coeff_draws.shape == (8, spec.n_params)
        assert np.all(first.lower <= first.upper)
        assert first.n_dropped == 0 and not first.unreliable
        point = ace(spec, fitted, data, treat, control).effect
        assert_allclose(first.point, point, atol=0)

    def test_parallel_matches_sequential(self):
        spec, data, fitted, treat, control = self.small_problem()
        kwargs = dict(n_boot=6, level=0.9, seed=7, n_random_starts=0)
        seq = bootstrap_ci(spec, data, fitted, treat, control, n_jobs=1, **kwargs)
        par = bootstrap_ci(spec, data, fitted, treat, control, n_jobs=2, **kwargs)
        assert_allclose(par.draws, seq.draws, atol=1e-10)
        assert_allclose(par.lower, seq.lower, atol=1e-10)

    def test_dropped_replicates_flagged(self, monkeypatch):
        spec, data, fitted, treat, control = self.small_problem()
        real_fit = causal_module.fit
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] % 2 == 0:
                raise ValidationError("synthetic failure")
            return real_fit(*args, **kwargs)

        monkeypatch.setattr(causal_module, "fit", flaky)
        result = bootstrap_ci(
            spec, data, fitted, treat, control,
            n_boot=8, seed=5, n_random_starts=0,
        )
        assert result.n_dropped == 4
        assert result.unreliable
        assert result.draws.shape[0] == 4
        assert any("synthetic failure" in m for m in result.messages)

    def test_bad_settings_rejected(self):
        spec, data, fitted, treat, control = self.small_problem()
        with pytest.raises(ValidationError):
            bootstrap_ci(spec, data, fitted, treat, control, level=1.2)
        with pytest.raises(ValidationError):
            bootstrap_ci(spec, data, fitted, treat, control, n_boot=0)
