"""Interventional response distributions, state alignment, and bootstrap CIs.

An intervention fixes covariate values over a window of time points. Its
effect on the response distribution at the end of the window is obtained by
replaying the forward recursion with the modified design rows while treating
the responses inside the window as unobserved, so that downstream feedback
runs through the model rather than through the factual responses. Averaging
the resulting joint (state, response) arrays over sequences gives the
population-level estimate, and differences between two such runs give
average causal effects.

Bootstrap intervals refit the model on resampled sequences, starting from
the full-data coefficients plus optional random starts, and report
percentile intervals of the effect draws. Hidden-state labels are aligned
to the full-data fit before coefficient draws are stored, since the
likelihood is invariant under relabeling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import linear_sum_assignment

from .errors import FanHmmError, UnsupportedCaseError, ValidationError
from .estimation import FitOptions, fit
from .inference import _column_pattern, _forward_batch, _forward_seq, _gammas
from .model import (
    MISSING,
    CoefficientSet,
    ModelSpec,
    PanelDataset,
    pack_params,
    permute_states,
)
from .simplex import softmax

__all__ = [
    "InterventionPlan",
    "CausalEstimate",
    "AceResult",
    "BootstrapDraws",
    "BootstrapResult",
    "estimate_do",
    "ace",
    "align_states",
    "bootstrap_ci",
    "bootstrap_effect_draws",
]

_MODES = ("recurring", "atomic")

# beyond this state count, alignment switches from exhaustive search to an
# assignment relaxation
_EXHAUSTIVE_STATES = 3


@dataclass(frozen=True)
class InterventionPlan:
    """A covariate assignment over a window of time points.

    Attributes
    ----------
    covariates : mapping of str to float
        Covariate names and the values they are fixed to.
    time : int
        One-based time point where the assignment starts.
    horizon : int
        The outcome is evaluated at ``time + horizon``.
    mode : str
        ``recurring`` holds the assignment through the outcome time;
        ``atomic`` assigns at the start time only and keeps the observed
        covariates afterwards, which is only meaningful when later
        covariate values do not react to the assigned one.
    covariate_autocorrelation : bool
        Declare that the covariate process is autocorrelated. Atomic plans
        then raise, because the observed downstream covariates would not
        have stayed the same under the assignment.
    """

    covariates: Mapping[str, float]
    time: int
    horizon: int = 0
    mode: str = "recurring"
    covariate_autocorrelation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariates", dict(self.covariates))
        if not self.covariates:
            raise ValidationError("an intervention needs at least one covariate")
        for name, value in self.covariates.items():
            if not np.isfinite(value):
                raise ValidationError(f"value for {name!r} must be finite")
        if self.time < 1:
            raise ValidationError("time must be a positive one-based index")
        if self.horizon < 0:
            raise ValidationError("horizon must be nonnegative")
        if self.mode not in _MODES:
            raise ValidationError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.mode == "atomic" and self.covariate_autocorrelation:
            raise UnsupportedCaseError(
                "an atomic assignment with an autocorrelated covariate process "
                "would need the downstream covariate values it changes; use a "
                "recurring assignment or supply exogenous covariates"
            )

    @property
    def outcome_time(self) -> int:
        return self.time + self.horizon

    @property
    def masked_times(self) -> tuple[int, ...]:
        """Window responses marginalized out (the outcome time excluded)."""
        return tuple(range(self.time, self.outcome_time))

    @property
    def assigned_times(self) -> tuple[int, ...]:
        if self.mode == "atomic":
            return (self.time,)
        return tuple(range(self.time, self.outcome_time + 1))


@dataclass
class CausalEstimate:
    """Average joint (state, response) distribution under an intervention.

    Attributes
    ----------
    joint : np.ndarray, shape (S, M)
        Mean of the per-sequence joint arrays at the outcome time.
    y_marginal : np.ndarray, shape (M,)
    z_marginal : np.ndarray, shape (S,)
    y_given_z : np.ndarray, shape (S, M)
        Rows with zero state mass are zero.
    n_used : int
        Sequences long enough to cover the window.
    n_excluded : int
        Sequences dropped for being shorter than the window.
    """

    joint: np.ndarray
    y_marginal: np.ndarray
    z_marginal: np.ndarray
    y_given_z: np.ndarray
    outcome_time: int
    n_used: int
    n_excluded: int


@dataclass
class AceResult:
    """Difference between two interventional response distributions."""

    effect: np.ndarray
    treated: CausalEstimate
    control: CausalEstimate


def _covariate_names(design) -> set[str]:
    return {col.name for col in design.columns if col.kind == "covariate"}


def _patch(design, rows, values):
    present = {k: v for k, v in values.items() if k in _covariate_names(design)}
    if not present:
        return rows
    return design.assign_covariates(rows, present)


def estimate_do(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    dataset: PanelDataset,
    plan: InterventionPlan,
    allow_truncation: bool = False,
) -> CausalEstimate:
    """Response distribution at the outcome time under an intervention.

    Covariates named in the plan are fixed over the assignment window in
    every design that contains them, responses strictly before the outcome
    time inside the window are marginalized out, and the forward recursion
    is replayed up to the outcome time. The per-sequence joint arrays are
    averaged with equal weights.

    Parameters
    ----------
    allow_truncation : bool
        Drop sequences shorter than the window instead of rejecting the
        whole dataset.

    Raises
    ------
    ValidationError
        If a plan covariate matches no design, if sequences are too short
        and ``allow_truncation`` is off, or if no sequence covers the window.
    """
    coeffs.validate_against(spec)
    dataset.validate_against(spec)
    known = (
        _covariate_names(spec.pi_design)
        | _covariate_names(spec.a_design)
        | _covariate_names(spec.b_design)
    )
    unknown = sorted(set(plan.covariates) - known)
    if unknown:
        raise ValidationError(
            f"plan covariates {unknown} appear in no design; known covariate "
            f"columns: {sorted(known)}"
        )

    t_out = plan.outcome_time
    long_enough = dataset.lengths >= t_out
    n_excluded = int((~long_enough).sum())
    if n_excluded and not allow_truncation:
        raise ValidationError(
            f"{n_excluded} sequences end before time {t_out}; pass "
            "allow_truncation=True to drop them"
        )
    if not long_enough.any():
        raise ValidationError(f"no sequence reaches time {t_out}")
    sub = dataset.subset(np.nonzero(long_enough)[0])

    y = sub.y[:, :t_out].copy()
    for tm in plan.masked_times:
        y[:, tm - 1] = MISSING
    x_pi = sub.x_pi
    x_a = sub.x_a[:, :t_out].copy()
    x_b = sub.x_b[:, :t_out].copy()
    for tm in plan.assigned_times:
        x_a[:, tm - 1] = _patch(spec.a_design, x_a[:, tm - 1], plan.covariates)
        x_b[:, tm - 1] = _patch(spec.b_design, x_b[:, tm - 1], plan.covariates)
    if plan.time == 1:
        x_pi = _patch(spec.pi_design, x_pi, plan.covariates)

    if spec.lag_in_emission and not (y[:, 0] != MISSING).all():
        raise UnsupportedCaseError(
            "the window covers time 1 but emissions condition on the first "
            "response; start the intervention later or drop the emission lag"
        )

    y_prev = np.ones_like(y)
    if t_out > 1:
        y_prev[:, 1:] = np.where(y[:, :-1] == MISSING, 1, y[:, :-1])
    xa_comp = spec.a_design.complete(x_a, y_prev)
    xb_comp = spec.b_design.complete(x_b, y_prev)

    gam = _gammas(coeffs)
    col_obs = _column_pattern(y)
    if col_obs is not None:
        _, _, d_all, _, _, _ = _forward_batch(
            spec, gam, y, col_obs, x_pi, x_a, x_b, xa_comp, xb_comp
        )
        d_last = d_all[:, -1]
    else:
        d_last = np.empty((len(y), spec.n_states, spec.n_categories))
        for i in range(len(y)):
            _, _, d_seq, _, _, _, _ = _forward_seq(
                spec, gam, y[i], x_pi[i], x_a[i], x_b[i]
            )
            d_last[i] = d_seq[-1]

    joint = d_last.mean(axis=0)
    z_marginal = joint.sum(axis=1)
    y_given_z = np.divide(
        joint,
        z_marginal[:, None],
        out=np.zeros_like(joint),
        where=z_marginal[:, None] > 0,
    )
    return CausalEstimate(
        joint=joint,
        y_marginal=joint.sum(axis=0),
        z_marginal=z_marginal,
        y_given_z=y_given_z,
        outcome_time=t_out,
        n_used=int(long_enough.sum()),
        n_excluded=n_excluded,
    )


def ace(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    dataset: PanelDataset,
    plan_treated: InterventionPlan,
    plan_control: InterventionPlan,
    allow_truncation: bool = False,
) -> AceResult:
    """Average causal effect: difference of two interventional distributions.

    Both plans must target the same outcome time so the contrast compares
    the same quantity. The effect vector sums to zero by construction.
    """
    if (plan_treated.time, plan_treated.horizon) != (
        plan_control.time,
        plan_control.horizon,
    ):
        raise ValidationError(
            "treated and control plans must share time and horizon"
        )
    treated = estimate_do(spec, coeffs, dataset, plan_treated, allow_truncation)
    control = estimate_do(spec, coeffs, dataset, plan_control, allow_truncation)
    return AceResult(
        effect=treated.y_marginal - control.y_marginal,
        treated=treated,
        control=control,
    )


# ---------------------------------------------------------------------------
# State alignment
# ---------------------------------------------------------------------------


def _context_tables(spec, coeffs, dataset):
    """Probability tables at the dataset-average design row, mixing the
    previous response uniformly."""
    g_pi, g_a, g_b = _gammas(coeffs)
    x_pi = dataset.x_pi.mean(axis=0)
    in_len = np.arange(dataset.t_max)[None, :] < dataset.lengths[:, None]
    xa_mean = dataset.x_a[in_len].mean(axis=0)
    xb_mean = dataset.x_b[in_len].mean(axis=0)
    m_n = spec.n_categories
    xa_rows = spec.a_design.complete_all_lags(xa_mean, m_n)
    xb_rows = spec.b_design.complete_all_lags(xb_mean, m_n)
    pi = softmax(g_pi @ x_pi)
    a_tab = softmax(np.einsum("srk,mk->msr", g_a, xa_rows), axis=-1).mean(axis=0)
    b_tab = softmax(np.einsum("sjk,mk->msj", g_b, xb_rows), axis=-1).mean(axis=0)
    return pi, a_tab, b_tab


def align_states(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    reference: CoefficientSet,
    dataset: PanelDataset,
) -> tuple[CoefficientSet, np.ndarray]:
    """Relabel hidden states to match a reference fit.

    States are compared through their initial, transition, and emission
    probabilities at the dataset-average design row. Up to three states
    every permutation is scored exactly; for more states the problem is
    relaxed to an assignment whose transition cost compares rows under
    identical destination labels.

    Returns
    -------
    aligned : CoefficientSet
        ``permute_states(coeffs, perm)``.
    perm : np.ndarray
        Old state index for each new position.
    """
    s_n = spec.n_states
    if s_n == 1:
        return coeffs.copy(), np.zeros(1, dtype=int)
    pi_c, a_c, b_c = _context_tables(spec, coeffs, dataset)
    pi_r, a_r, b_r = _context_tables(spec, reference, dataset)

    if s_n <= _EXHAUSTIVE_STATES:
        best_perm, best_cost = None, np.inf
        for perm in itertools.permutations(range(s_n)):
            p = np.array(perm)
            cost = (
                np.sum((pi_c[p] - pi_r) ** 2)
                + np.sum((b_c[p] - b_r) ** 2)
                + np.sum((a_c[np.ix_(p, p)] - a_r) ** 2)
            )
            if cost < best_cost:
                best_perm, best_cost = p, cost
        perm = best_perm
    else:
        cost = np.zeros((s_n, s_n))
        for r in range(s_n):
            for s in range(s_n):
                cost[r, s] = (
                    (pi_c[s] - pi_r[r]) ** 2
                    + np.sum((b_c[s] - b_r[r]) ** 2)
                    + np.sum((a_c[s] - a_r[r]) ** 2)
                )
        _, perm = linear_sum_assignment(cost)
    return permute_states(coeffs, perm), np.asarray(perm)


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    """Percentile bootstrap summary for an average causal effect.

    Attributes
    ----------
    point : np.ndarray, shape (M,)
        Effect at the full-data coefficients.
    lower, upper : np.ndarray, shape (M,)
        Percentile interval bounds at the requested level.
    draws : np.ndarray, shape (n_effective, M)
        Effect draws from the completed replicates.
    coeff_draws : np.ndarray, shape (n_effective, n_params)
        Packed coefficients of each replicate after label alignment.
    n_dropped : int
        Replicates whose refit failed.
    unreliable : bool
        True when more than a fifth of the replicates were dropped.
    """

    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    draws: np.ndarray
    coeff_draws: np.ndarray
    n_requested: int
    n_dropped: int
    unreliable: bool
    messages: list[str] = field(default_factory=list)


@dataclass
class BootstrapDraws:
    """Raw bootstrap draws for one or more intervention contrasts.

    Attributes
    ----------
    effects : np.ndarray, shape (n_effective, n_pairs, M)
        Effect draws per completed replicate and plan pair.
    coeff_draws : np.ndarray, shape (n_effective, n_params)
        Packed coefficients of each replicate after label alignment.
    """

    effects: np.ndarray
    coeff_draws: np.ndarray
    n_requested: int
    n_dropped: int
    unreliable: bool
    messages: list[str] = field(default_factory=list)


def _bootstrap_replicate(
    spec,
    dataset,
    fitted,
    plan_pairs,
    fit_options,
    entropy,
    evaluate_on_original,
    allow_truncation,
):
    rng = np.random.default_rng(entropy)
    idx = rng.integers(0, dataset.n_sequences, dataset.n_sequences)
    sample = dataset.subset(idx)
    try:
        refit = fit(spec, sample, fit_options, seed=rng, initial=fitted)
        target = dataset if evaluate_on_original else sample
        effects = np.stack(
            [
                ace(spec, refit.coeffs, target, treated, control, allow_truncation).effect
                for treated, control in plan_pairs
            ]
        )
        aligned, _ = align_states(spec, refit.coeffs, fitted, sample)
        return effects, pack_params(aligned), None
    except FanHmmError as exc:
        return None, None, f"replicate dropped: {exc}"


def bootstrap_effect_draws(
    spec: ModelSpec,
    dataset: PanelDataset,
    fitted: CoefficientSet,
    plan_pairs: Sequence[tuple[InterventionPlan, InterventionPlan]],
    n_boot: int = 50,
    seed: int | None = None,
    fit_options: FitOptions | None = None,
    n_random_starts: int = 1,
    allow_truncation: bool = False,
    evaluate_on_original: bool = False,
    n_jobs: int = 1,
) -> BootstrapDraws:
    """Resample, refit, and evaluate several effect contrasts per draw.

    Each replicate resamples sequences with replacement, refits from the
    full-data coefficients plus ``n_random_starts`` random starts, and
    evaluates every (treated, control) plan pair on the resampled data
    (or on the original data when ``evaluate_on_original`` is set). One
    refit serves all pairs, so adding pairs costs only forward passes.
    Replicates whose refit fails are dropped.

    Notes
    -----
    Reproducibility: every replicate derives its own random stream from
    ``seed``, so results do not depend on ``n_jobs``.
    """
    if n_boot < 1:
        raise ValidationError("n_boot must be at least 1")
    plan_pairs = list(plan_pairs)
    if not plan_pairs:
        raise ValidationError("plan_pairs must be nonempty")
    base = fit_options or FitOptions()
    per_fit = FitOptions(
        method=base.method,
        penalty=base.penalty,
        n_starts=n_random_starts,
        init_sd=base.init_sd,
        max_em_iter=base.max_em_iter,
        em_tol=base.em_tol,
        max_iter=base.max_iter,
        ftol=base.ftol,
        n_jobs=1,
    )
    children = np.random.SeedSequence(seed).spawn(n_boot)
    args = [
        (
            spec,
            dataset,
            fitted,
            plan_pairs,
            per_fit,
            children[b],
            evaluate_on_original,
            allow_truncation,
        )
        for b in range(n_boot)
    ]
    if n_jobs != 1:
        rows = Parallel(n_jobs=n_jobs)(
            delayed(_bootstrap_replicate)(*a) for a in args
        )
    else:
        rows = [_bootstrap_replicate(*a) for a in args]

    effects = [r[0] for r in rows if r[0] is not None]
    coeff_draws = [r[1] for r in rows if r[1] is not None]
    messages = [r[2] for r in rows if r[2] is not None]
    n_dropped = n_boot - len(effects)
    if not effects:
        raise ValidationError(
            "every bootstrap replicate failed; " + "; ".join(messages[:3])
        )
    return BootstrapDraws(
        effects=np.stack(effects),
        coeff_draws=np.stack(coeff_draws),
        n_requested=n_boot,
        n_dropped=n_dropped,
        unreliable=n_dropped > 0.2 * n_boot,
        messages=messages,
    )


def bootstrap_ci(
    spec: ModelSpec,
    dataset: PanelDataset,
    fitted: CoefficientSet,
    plan_treated: InterventionPlan,
    plan_control: InterventionPlan,
    n_boot: int = 50,
    level: float = 0.9,
    seed: int | None = None,
    fit_options: FitOptions | None = None,
    n_random_starts: int = 1,
    allow_truncation: bool = False,
    evaluate_on_original: bool = False,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Percentile bootstrap interval for an average causal effect.

    Sequences are resampled with replacement; each replicate refits the
    model starting from the full-data coefficients plus ``n_random_starts``
    random starts, then evaluates the effect on the resampled data (or the
    original data when ``evaluate_on_original`` is set). Replicates whose
    refit fails are dropped; the result is flagged unreliable when more
    than 20 percent drop.

    Notes
    -----
    Reproducibility: every replicate derives its own random stream from
    ``seed``, so results do not depend on ``n_jobs``.
    """
    if not 0 < level < 1:
        raise ValidationError("level must lie strictly between 0 and 1")
    point = ace(
        spec, fitted, dataset, plan_treated, plan_control, allow_truncation
    ).effect
    raw = bootstrap_effect_draws(
        spec,
        dataset,
        fitted,
        [(plan_treated, plan_control)],
        n_boot=n_boot,
        seed=seed,
        fit_options=fit_options,
        n_random_starts=n_random_starts,
        allow_truncation=allow_truncation,
        evaluate_on_original=evaluate_on_original,
        n_jobs=n_jobs,
    )
    draws = raw.effects[:, 0, :]
    alpha = (1.0 - level) / 2.0
    lower = np.quantile(draws, alpha, axis=0)
    upper = np.quantile(draws, 1.0 - alpha, axis=0)
    return BootstrapResult(
        point=point,
        lower=lower,
        upper=upper,
        level=level,
        draws=draws,
        coeff_draws=raw.coeff_draws,
        n_requested=raw.n_requested,
        n_dropped=raw.n_dropped,
        unreliable=raw.unreliable,
        messages=raw.messages,
    )
