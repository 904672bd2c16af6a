"""Penalized maximum-likelihood estimation: direct, EM, and hybrid fitting.

All three methods maximize the same penalized log-likelihood. The direct
method runs L-BFGS-B on the packed unconstrained coefficients with analytic
gradients. The EM method alternates smoothing passes with per-block
multinomial-logit maximizations; each block problem is concave, and a guard
keeps the previous block coefficients whenever a block solve fails to
improve, so the objective never decreases beyond float noise. The hybrid
method runs a capped EM first and polishes with L-BFGS-B.

Multistart fits draw initial coefficients by stratified sampling so the
starts spread over the sampling distribution even when few are used, and
shift the transition intercepts toward sticky diagonals, which separates the
states enough for the optimizer to break the labeling symmetry.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize
from scipy.stats import norm

from .design import INTERCEPT_NAME
from .errors import InitializationError, ValidationError
from .inference import (
    a_block_value_grad,
    b_block_value_grad,
    build_mstep_data,
    dataset_estep,
    loglik_and_gradient,
    loglik_dataset,
    pi_block_value_grad,
)
from .model import CoefficientSet, ModelSpec, PanelDataset, pack_params, unpack_params

__all__ = [
    "FitOptions",
    "StartOutcome",
    "FitResult",
    "fit",
    "sample_initial_values",
]

# a start is successful when its objective is within this relative gap of
# the best start
SUCCESS_RTOL = 1e-5

# value handed to the optimizer when the objective is not finite; large
# enough that any finite likelihood wins the comparison
_BAD_VALUE = 1e15

# EM may lose at most this much per iteration before the guard trips
_EM_SLACK = 1e-9

_METHODS = ("direct", "em", "hybrid")


@dataclass
class FitOptions:
    """Settings shared by all fitting methods.

    Attributes
    ----------
    method : str
        One of ``direct``, ``em``, ``hybrid``.
    penalty : float
        Ridge weight on the unconstrained coefficients.
    n_starts : int
        Number of random starts (a warm start, when given, is extra).
    init_sd : float
        Scale of the stratified normal initial values.
    max_em_iter : int
        Iteration cap for the EM loop (also the EM stage of ``hybrid``).
    em_tol : float
        Relative objective change below which EM stops.
    max_iter : int
        Iteration cap for L-BFGS-B.
    ftol : float
        Relative objective tolerance handed to L-BFGS-B.
    n_jobs : int
        Parallel workers across starts; 1 runs sequentially.
    """

    method: str = "direct"
    penalty: float = 0.0
    n_starts: int = 1
    init_sd: float = 2.0
    max_em_iter: int = 100
    em_tol: float = 1e-8
    max_iter: int = 10_000
    ftol: float = 1e-8
    n_jobs: int = 1

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValidationError(
                f"method must be one of {_METHODS}, got {self.method!r}"
            )
        if self.penalty < 0:
            raise ValidationError("penalty must be nonnegative")
        if self.n_starts < 0:
            raise ValidationError("n_starts must be nonnegative")


@dataclass
class StartOutcome:
    """What happened at one start of a multistart fit."""

    loglik: float
    converged: bool
    n_iter: int
    is_warm: bool
    em_history: list[float] = field(default_factory=list)


@dataclass
class FitResult:
    """A fitted model plus the multistart bookkeeping around it.

    Attributes
    ----------
    loglik : float
        Unpenalized log-likelihood at the returned coefficients.
    objective : float
        Penalized objective at the returned coefficients; multistart
        comparisons use this value.
    starts : list of StartOutcome
        Per-start outcomes in submission order (warm start first).
    n_success : int
        Starts whose objective lies within ``SUCCESS_RTOL`` of the best.
    """

    spec: ModelSpec
    coeffs: CoefficientSet
    loglik: float
    objective: float
    method: str
    penalty: float
    starts: list[StartOutcome]
    best_start: int
    n_success: int
    elapsed_seconds: float

    @property
    def success_rate(self) -> float:
        return self.n_success / len(self.starts) if self.starts else 0.0

    @property
    def em_history(self) -> list[float]:
        return self.starts[self.best_start].em_history


def sample_initial_values(
    spec: ModelSpec,
    n_starts: int,
    init_sd: float = 2.0,
    rng: np.random.Generator | int | None = None,
    sticky_transitions: bool = True,
) -> list[CoefficientSet]:
    """Stratified normal initial coefficients for a multistart fit.

    Each packed coordinate gets one draw per stratum of the normal
    distribution, assigned to starts in shuffled order, so no two starts
    fall in the same quantile band of any coordinate. When the transition
    design has an intercept, those columns are shifted so every state
    initially stays put with probability ``1 - 0.05 (S - 1)``.

    Returns
    -------
    list of CoefficientSet, length ``n_starts``
    """
    rng = np.random.default_rng(rng)
    if n_starts <= 0:
        return []
    n_p = spec.n_params
    u = np.empty((n_starts, n_p))
    for j in range(n_p):
        u[:, j] = (rng.permutation(n_starts) + rng.uniform(size=n_starts)) / n_starts
    z = norm.ppf(u) * init_sd
    starts = [unpack_params(spec, z[k]) for k in range(n_starts)]

    if sticky_transitions and spec.n_states > 1:
        try:
            icol = spec.a_design.column_index(INTERCEPT_NAME)
        except ValidationError:
            icol = None
        if icol is not None:
            s_n = spec.n_states
            q = starts[0].basis_s.q
            off = 0.05
            for s in range(s_n):
                target = np.full(s_n, off)
                target[s] = 1.0 - off * (s_n - 1)
                shift = q.T @ np.log(target)
                for coeffs in starts:
                    coeffs.eta_a[s, :, icol] += shift
    return starts


def _neg_objective(spec, dataset, penalty):
    def fun(packed):
        coeffs = unpack_params(spec, packed)
        value, grad = loglik_and_gradient(spec, coeffs, dataset, penalty)
        if not np.isfinite(value):
            return _BAD_VALUE, np.zeros_like(packed)
        return -value, -grad

    return fun


def _run_direct(spec, dataset, coeffs0, options, check_start=True):
    value0, _ = loglik_and_gradient(spec, coeffs0, dataset, options.penalty)
    if not np.isfinite(value0):
        if check_start:
            raise InitializationError(
                "the log-likelihood is not finite at the initial coefficients"
            )
        return coeffs0, value0, 0, False
    if spec.n_params == 0:
        return coeffs0, value0, 0, True
    res = minimize(
        _neg_objective(spec, dataset, options.penalty),
        pack_params(coeffs0),
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": options.max_iter,
            "ftol": options.ftol,
            "maxcor": 10,
        },
    )
    return unpack_params(spec, res.x), -float(res.fun), int(res.nit), bool(res.success)


def _maximize_block(value_grad, eta0, args, penalty):
    if eta0.size == 0:
        return eta0
    shape = eta0.shape

    def neg(v):
        value, grad = value_grad(v.reshape(shape), *args, penalty)
        return -value, -grad.ravel()

    res = minimize(
        neg,
        eta0.ravel(),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 500, "ftol": 1e-12},
    )
    new = res.x.reshape(shape)
    # concave blocks should only improve; keep the old block if the solver
    # returned something worse
    if value_grad(new, *args, penalty)[0] >= value_grad(eta0, *args, penalty)[0]:
        return new
    return eta0


def _mstep(spec, coeffs, data, penalty):
    new = coeffs.copy()
    q_s, q_m = coeffs.basis_s.q, coeffs.basis_m.q
    new.eta_pi = _maximize_block(
        pi_block_value_grad, coeffs.eta_pi, (q_s, data.x_pi, data.e_pi), penalty
    )
    if data.xa_rows.shape[0]:
        for s in range(spec.n_states):
            new.eta_a[s] = _maximize_block(
                a_block_value_grad,
                coeffs.eta_a[s],
                (q_s, data.xa_rows, data.ea_rows[:, s, :]),
                penalty,
            )
    if data.xb_rows.shape[0]:
        for s in range(spec.n_states):
            new.eta_b[s] = _maximize_block(
                b_block_value_grad,
                coeffs.eta_b[s],
                (q_m, data.xb_rows, data.eb_rows[:, s], data.yb_rows),
                penalty,
            )
    return new


def _penalized_total(total, coeffs, penalty):
    return total - 0.5 * penalty * coeffs.norm_sq() if penalty else total


def _run_em(spec, dataset, coeffs0, options, check_start=True):
    cur = coeffs0.copy()
    history: list[float] = []
    prev_coeffs = cur
    n_iter = 0
    for it in range(options.max_em_iter + 1):
        counts, total = dataset_estep(spec, cur, dataset)
        value = _penalized_total(total, cur, options.penalty)
        if it == 0 and not np.isfinite(value):
            if check_start:
                raise InitializationError(
                    "the log-likelihood is not finite at the initial coefficients"
                )
            return cur, value, 0, False, history
        if history:
            if value < history[-1] - _EM_SLACK:
                # a worsening step: stand on the previous coefficients
                return prev_coeffs, history[-1], n_iter, True, history
            done = abs(value - history[-1]) <= options.em_tol * max(
                1.0, abs(history[-1])
            )
            history.append(value)
            if done:
                return cur, value, n_iter, True, history
        else:
            history.append(value)
        if it == options.max_em_iter:
            return cur, value, n_iter, False, history
        prev_coeffs = cur
        cur = _mstep(spec, cur, build_mstep_data(spec, dataset, counts), options.penalty)
        n_iter = it + 1


def _run_start(spec, dataset, coeffs0, options, is_warm):
    t0 = time.perf_counter()
    history: list[float] = []
    if options.method == "direct":
        coeffs, value, n_iter, converged = _run_direct(spec, dataset, coeffs0, options)
    elif options.method == "em":
        coeffs, value, n_iter, converged, history = _run_em(
            spec, dataset, coeffs0, options
        )
    else:
        coeffs, value, em_iter, _, history = _run_em(spec, dataset, coeffs0, options)
        coeffs, value, lb_iter, converged = _run_direct(
            spec, dataset, coeffs, options, check_start=False
        )
        n_iter = em_iter + lb_iter
    outcome = StartOutcome(
        loglik=value,
        converged=converged,
        n_iter=n_iter,
        is_warm=is_warm,
        em_history=history,
    )
    return coeffs, outcome, time.perf_counter() - t0


def fit(
    spec: ModelSpec,
    dataset: PanelDataset,
    options: FitOptions | None = None,
    seed: np.random.Generator | int | None = None,
    initial: CoefficientSet | None = None,
) -> FitResult:
    """Fit a model by penalized maximum likelihood with multiple starts.

    Parameters
    ----------
    options : FitOptions, optional
        Method, penalty, and stopping settings; defaults fit one random
        start by the direct method without a penalty.
    seed : Generator or int, optional
        Drives the initial values only; every other step is deterministic.
    initial : CoefficientSet, optional
        Warm start, run before (and in addition to) the random starts.

    Returns
    -------
    FitResult
        Coefficients of the best start by penalized objective, plus
        per-start outcomes and the success count.
    """
    options = options or FitOptions()
    dataset.validate_against(spec)
    t0 = time.perf_counter()

    starts: list[tuple[CoefficientSet, bool]] = []
    if initial is not None:
        initial.validate_against(spec)
        starts.append((initial.copy(), True))
    for coeffs in sample_initial_values(spec, options.n_starts, options.init_sd, seed):
        starts.append((coeffs, False))
    if not starts:
        raise ValidationError("need a warm start or n_starts >= 1")

    if options.n_jobs != 1 and len(starts) > 1:
        runs = Parallel(n_jobs=options.n_jobs)(
            delayed(_run_start)(spec, dataset, c0, options, warm)
            for c0, warm in starts
        )
    else:
        runs = [_run_start(spec, dataset, c0, options, warm) for c0, warm in starts]

    outcomes = [out for _, out, _ in runs]
    values = np.array([out.loglik for out in outcomes])
    best = int(np.nanargmax(values)) if np.isfinite(values).any() else 0
    best_value = values[best]
    if not np.isfinite(best_value):
        raise InitializationError("no start reached a finite log-likelihood")
    gap = np.abs(values - best_value)
    n_success = int(np.sum(gap < SUCCESS_RTOL * abs(best_value))) if best_value != 0 else int(
        np.sum(gap == 0)
    )

    coeffs = runs[best][0]
    raw = loglik_dataset(spec, coeffs, dataset)
    return FitResult(
        spec=spec,
        coeffs=coeffs,
        loglik=raw,
        objective=float(best_value),
        method=options.method,
        penalty=options.penalty,
        starts=outcomes,
        best_start=best,
        n_success=n_success,
        elapsed_seconds=time.perf_counter() - t0,
    )
