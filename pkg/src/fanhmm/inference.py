"""Likelihood engine: forward/backward recursions, gradients, expected counts.

The forward pass tracks, per time point, the joint array ``D_t`` over
(state, response) pairs given the observed history before t. Conditioning on
an observed response selects and renormalizes one column; a missing response
is marginalized exactly by mixing the per-category columns through the
category-specific transition and emission matrices. Each ``D_t`` sums to one,
so the log-likelihood is the sum of the per-step log normalizers of observed
responses. Sequences whose first response is missing are rejected when
emissions depend on the previous response, because that model conditions on
the first response instead of modeling it.

Gradients are an exact reverse-mode pass through the same recursion, which
covers missing responses and both feedback edges uniformly; they are
validated against central finite differences in the test suite.

Two equivalent engines exist: a per-sequence reference engine that accepts
any missingness pattern, and a batched engine used when sequences share a
length and a per-time observedness pattern (the common complete-data case,
and intervention evaluations where the same times are masked everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import UnsupportedCaseError, ValidationError
from .model import MISSING, CoefficientSet, ModelSpec, PanelDataset
from .simplex import softmax

__all__ = [
    "ForwardResult",
    "BackwardResult",
    "ExpectedCounts",
    "forward",
    "backward",
    "estep",
    "loglik_dataset",
    "loglik_and_gradient",
    "dataset_estep",
    "MStepData",
    "build_mstep_data",
    "pi_block_value_grad",
    "a_block_value_grad",
    "b_block_value_grad",
]


@dataclass
class ForwardResult:
    """Output of the forward pass over one sequence.

    Attributes
    ----------
    loglik : float
        Sum of log normalizers over observed, unmasked responses.
    alpha_norm : np.ndarray, shape (T, S)
        Filtered state distribution at each time (rows sum to one).
    d : np.ndarray, shape (T, S, M)
        Joint (state, response) arrays; each slice sums to one.
    scaling_logs : np.ndarray, shape (T,)
        Per-step log normalizers; zero at missing or masked times.
    """

    loglik: float
    alpha_norm: np.ndarray
    d: np.ndarray
    scaling_logs: np.ndarray


@dataclass
class BackwardResult:
    """Scaled backward variables for one sequence.

    ``beta`` is scaled by the forward normalizers, so elementwise products
    with the filtered distribution give smoothed state posteriors directly.
    """

    beta: np.ndarray


@dataclass
class ExpectedCounts:
    """Per-sequence expected sufficient statistics from one smoothing pass.

    Attributes
    ----------
    e_pi : np.ndarray, shape (S,)
        Posterior of the initial state.
    e_a : np.ndarray, shape (T, S, S)
        Posterior of each consecutive state pair; slice t covers the
        transition into time t (slice 0 is zero).
    e_b : np.ndarray, shape (T, S)
        Posterior state weights attached to the observed response at each
        time; rows where ``b_attached`` is False carry no emission term.
    b_attached : np.ndarray, shape (T,), bool
    loglik : float
    """

    e_pi: np.ndarray
    e_a: np.ndarray
    e_b: np.ndarray
    b_attached: np.ndarray
    loglik: float


def _gammas(coeffs: CoefficientSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return coeffs.gamma_pi(), coeffs.gamma_a(), coeffs.gamma_b()


def _softmax_row_chain(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Adjoint of a row-wise softmax: map d/d(probs) to d/d(logits)."""
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


def _apply_mask(y: np.ndarray, mask_times: Sequence[int]) -> np.ndarray:
    if not len(mask_times):
        return y
    y = y.copy()
    for t in mask_times:
        if not 1 <= t <= y.shape[-1]:
            raise ValidationError(f"mask time {t} outside 1..{y.shape[-1]}")
        y[..., t - 1] = MISSING
    return y


# ---------------------------------------------------------------------------
# Per-sequence reference engine
# ---------------------------------------------------------------------------


def _forward_seq(
    spec: ModelSpec,
    gam: tuple[np.ndarray, np.ndarray, np.ndarray],
    y: np.ndarray,
    x_pi: np.ndarray,
    x_a: np.ndarray,
    x_b: np.ndarray,
    stop_after: int | None = None,
    keep_trace: bool = False,
):
    g_pi, g_a, g_b = gam
    s_n, m_n = spec.n_states, spec.n_categories
    t_n = len(y) if stop_after is None else stop_after
    if not 1 <= t_n <= len(y):
        raise ValidationError(f"stop_after must lie in 1..{len(y)}, got {stop_after}")

    pi = softmax(g_pi @ x_pi)
    d_all = np.empty((t_n, s_n, m_n))
    alpha = np.empty((t_n, s_n))
    scal = np.zeros(t_n)
    c_all = np.ones(t_n)
    trace: list[tuple] = []

    if spec.lag_in_emission:
        if y[0] == MISSING:
            raise ValidationError(
                "the first response is missing but emissions depend on the "
                "previous response; the first response must be observed"
            )
        d = np.zeros((s_n, m_n))
        d[:, y[0] - 1] = pi
        step: tuple = ("init_lagged",)
    else:
        row_b = x_b[0]
        b1 = softmax(g_b @ row_b, axis=-1)
        d = pi[:, None] * b1
        step = ("init_plain", row_b, b1)
    if keep_trace:
        trace.append(step)

    loglik = 0.0
    for t in range(t_n):
        if t > 0:
            prev = int(y[t - 1])
            if prev != MISSING:
                row_a = spec.a_design.complete(x_a[t], prev)
                row_b = spec.b_design.complete(x_b[t], prev)
                a_mat = softmax(g_a @ row_a, axis=-1)
                b_mat = softmax(g_b @ row_b, axis=-1)
                vbar = alpha[t - 1]
                w = a_mat.T @ vbar
                d = w[:, None] * b_mat
                if keep_trace:
                    trace.append(("cond", row_a, a_mat, row_b, b_mat, vbar, c_all[t - 1], w))
            else:
                rows_a = spec.a_design.complete_all_lags(x_a[t], m_n)
                rows_b = spec.b_design.complete_all_lags(x_b[t], m_n)
                a_var = softmax(np.einsum("srk,mk->msr", g_a, rows_a), axis=-1)
                b_var = softmax(np.einsum("sjk,mk->msj", g_b, rows_b), axis=-1)
                d_prev = d
                w_var = np.einsum("msr,sm->mr", a_var, d_prev)
                d = np.einsum("mr,mrj->rj", w_var, b_var)
                if keep_trace:
                    trace.append(("marg", rows_a, a_var, rows_b, b_var, d_prev, w_var))
        d_all[t] = d
        if y[t] != MISSING:
            col = d[:, y[t] - 1]
            c = col.sum()
            c_all[t] = c
            with np.errstate(divide="ignore", invalid="ignore"):
                scal[t] = np.log(c)
                alpha[t] = col / c if c > 0 else np.full(s_n, np.nan)
            loglik += scal[t]
        else:
            alpha[t] = d.sum(axis=1)
    return loglik, alpha, d_all, scal, c_all, pi, trace


def _gradient_seq(spec, gam, y, x_pi, x_a, x_b):
    g_pi, g_a, g_b = gam
    s_n, m_n = spec.n_states, spec.n_categories
    loglik, alpha, d_all, _, c_all, pi, trace = _forward_seq(
        spec, gam, y, x_pi, x_a, x_b, keep_trace=True
    )
    d_gpi = np.zeros_like(g_pi)
    d_ga = np.zeros_like(g_a)
    d_gb = np.zeros_like(g_b)
    if not np.isfinite(loglik):
        return loglik, d_gpi, d_ga, d_gb

    t_n = len(y)
    g = np.zeros((s_n, m_n))
    if y[t_n - 1] != MISSING:
        g[:, y[t_n - 1] - 1] += 1.0 / c_all[t_n - 1]
    for t in range(t_n - 1, 0, -1):
        step = trace[t]
        if step[0] == "cond":
            _, row_a, a_mat, row_b, b_mat, vbar, sv, w = step
            db = g * w[:, None]
            dw = (g * b_mat).sum(axis=1)
            dvbar = a_mat @ dw
            da = np.outer(vbar, dw)
            dv = (dvbar - vbar @ dvbar) / sv
            g = np.zeros((s_n, m_n))
            g[:, y[t - 1] - 1] = dv + 1.0 / sv
            d_ga += _softmax_row_chain(a_mat, da)[:, :, None] * row_a
            d_gb += _softmax_row_chain(b_mat, db)[:, :, None] * row_b
        else:
            _, rows_a, a_var, rows_b, b_var, d_prev, w_var = step
            db_var = np.einsum("rj,mr->mrj", g, w_var)
            dw_var = np.einsum("rj,mrj->mr", g, b_var)
            dd_prev = np.einsum("msr,mr->sm", a_var, dw_var)
            da_var = np.einsum("sm,mr->msr", d_prev, dw_var)
            g = dd_prev
            d_ga += np.einsum(
                "msr,mk->srk", _softmax_row_chain(a_var, da_var), rows_a
            )
            d_gb += np.einsum(
                "msj,mk->sjk", _softmax_row_chain(b_var, db_var), rows_b
            )
            if y[t - 1] != MISSING:
                g[:, y[t - 1] - 1] += 1.0 / c_all[t - 1]

    step = trace[0]
    if step[0] == "init_lagged":
        dpi = g[:, y[0] - 1]
    else:
        _, row_b, b1 = step
        dpi = (g * b1).sum(axis=1)
        d_gb += _softmax_row_chain(b1, g * pi[:, None])[:, :, None] * row_b
    d_gpi += np.outer(_softmax_row_chain(pi, dpi), x_pi)
    return loglik, d_gpi, d_ga, d_gb


# ---------------------------------------------------------------------------
# Batched engine (shared length and per-time observedness pattern)
# ---------------------------------------------------------------------------


def _column_pattern(y: np.ndarray) -> np.ndarray | None:
    """Per-time observedness if uniform across sequences, else None."""
    obs = y != MISSING
    col_all = obs.all(axis=0)
    col_none = (~obs).all(axis=0)
    if not np.all(col_all | col_none):
        return None
    return col_all


def _batch_matrices(gam, x_pi, xa_comp, xb_comp):
    g_pi, g_a, g_b = gam
    pi = softmax(x_pi @ g_pi.T, axis=-1)
    a_mat = softmax(np.einsum("srk,ntk->ntsr", g_a, xa_comp), axis=-1)
    b_mat = softmax(np.einsum("sjk,ntk->ntsj", g_b, xb_comp), axis=-1)
    return pi, a_mat, b_mat


def _forward_batch(
    spec: ModelSpec,
    gam,
    y: np.ndarray,
    col_obs: np.ndarray,
    x_pi: np.ndarray,
    xa_raw: np.ndarray,
    xb_raw: np.ndarray,
    xa_comp: np.ndarray,
    xb_comp: np.ndarray,
    stop_after: int | None = None,
    keep_trace: bool = False,
):
    g_pi, g_a, g_b = gam
    n_n, t_full = y.shape
    s_n, m_n = spec.n_states, spec.n_categories
    t_n = t_full if stop_after is None else stop_after
    rows = np.arange(n_n)

    pi, a_mat, b_mat = _batch_matrices(gam, x_pi, xa_comp, xb_comp)
    d_all = np.empty((n_n, t_n, s_n, m_n))
    alpha = np.empty((n_n, t_n, s_n))
    c_all = np.ones((n_n, t_n))
    loglik = np.zeros(n_n)
    var_steps: dict[int, tuple] = {}

    if spec.lag_in_emission:
        if not col_obs[0]:
            raise ValidationError(
                "the first response is missing but emissions depend on the "
                "previous response; the first response must be observed"
            )
        d = np.zeros((n_n, s_n, m_n))
        d[rows[:, None], np.arange(s_n)[None, :], (y[:, 0] - 1)[:, None]] = pi
    else:
        d = pi[:, :, None] * b_mat[:, 0]

    for t in range(t_n):
        if t > 0:
            if col_obs[t - 1]:
                vbar = alpha[:, t - 1]
                w = np.einsum("nsr,ns->nr", a_mat[:, t], vbar)
                d = w[:, :, None] * b_mat[:, t]
            else:
                rows_a = spec.a_design.complete_all_lags(xa_raw[:, t], m_n)
                rows_b = spec.b_design.complete_all_lags(xb_raw[:, t], m_n)
                a_var = softmax(np.einsum("srk,nmk->nmsr", g_a, rows_a), axis=-1)
                b_var = softmax(np.einsum("sjk,nmk->nmsj", g_b, rows_b), axis=-1)
                d_prev = d
                w_var = np.einsum("nmsr,nsm->nmr", a_var, d_prev)
                d = np.einsum("nmr,nmrj->nrj", w_var, b_var)
                if keep_trace:
                    var_steps[t] = (rows_a, a_var, rows_b, b_var, w_var)
        d_all[:, t] = d
        if col_obs[t]:
            col = d[rows, :, y[:, t] - 1]
            c = col.sum(axis=1)
            c_all[:, t] = c
            with np.errstate(divide="ignore", invalid="ignore"):
                loglik += np.log(c)
                alpha[:, t] = col / c[:, None]
        else:
            alpha[:, t] = d.sum(axis=2)
    return loglik, alpha, d_all, c_all, (pi, a_mat, b_mat), var_steps


def _gradient_batch(spec, gam, y, col_obs, x_pi, xa_raw, xb_raw, xa_comp, xb_comp):
    n_n, t_n = y.shape
    s_n, m_n = spec.n_states, spec.n_categories
    rows = np.arange(n_n)
    loglik, alpha, d_all, c_all, mats, var_steps = _forward_batch(
        spec, gam, y, col_obs, x_pi, xa_raw, xb_raw, xa_comp, xb_comp, keep_trace=True
    )
    pi, a_mat, b_mat = mats
    d_gpi = np.zeros_like(gam[0])
    d_ga = np.zeros_like(gam[1])
    d_gb = np.zeros_like(gam[2])
    total = float(loglik.sum())
    if not np.isfinite(total):
        return total, d_gpi, d_ga, d_gb

    da_fix = np.zeros_like(a_mat)
    db_fix = np.zeros_like(b_mat)
    g = np.zeros((n_n, s_n, m_n))
    if col_obs[t_n - 1]:
        g[rows[:, None], np.arange(s_n)[None, :], (y[:, t_n - 1] - 1)[:, None]] += (
            1.0 / c_all[:, t_n - 1]
        )[:, None]

    for t in range(t_n - 1, 0, -1):
        if col_obs[t - 1]:
            a_t, b_t = a_mat[:, t], b_mat[:, t]
            vbar = alpha[:, t - 1]
            sv = c_all[:, t - 1]
            w = np.einsum("nsr,ns->nr", a_t, vbar)
            db_fix[:, t] += g * w[:, :, None]
            dw = (g * b_t).sum(axis=2)
            dvbar = np.einsum("nsr,nr->ns", a_t, dw)
            da_fix[:, t] += np.einsum("ns,nr->nsr", vbar, dw)
            dv = (dvbar - (vbar * dvbar).sum(axis=1, keepdims=True)) / sv[:, None]
            g = np.zeros((n_n, s_n, m_n))
            g[rows[:, None], np.arange(s_n)[None, :], (y[:, t - 1] - 1)[:, None]] = (
                dv + (1.0 / sv)[:, None]
            )
        else:
            rows_a, a_var, rows_b, b_var, w_var = var_steps[t]
            d_prev = d_all[:, t - 1]
            db_var = np.einsum("nrj,nmr->nmrj", g, w_var)
            dw_var = np.einsum("nrj,nmrj->nmr", g, b_var)
            da_var = np.einsum("nsm,nmr->nmsr", d_prev, dw_var)
            g = np.einsum("nmsr,nmr->nsm", a_var, dw_var)
            d_ga += np.einsum(
                "nmsr,nmk->srk", _softmax_row_chain(a_var, da_var), rows_a
            )
            d_gb += np.einsum(
                "nmsj,nmk->sjk", _softmax_row_chain(b_var, db_var), rows_b
            )

    if spec.lag_in_emission:
        dpi = g[rows, :, y[:, 0] - 1]
    else:
        dpi = (g * b_mat[:, 0]).sum(axis=2)
        db_fix[:, 0] += g * pi[:, :, None]
    d_ga += np.einsum("ntsr,ntk->srk", _softmax_row_chain(a_mat, da_fix), xa_comp)
    d_gb += np.einsum("ntsj,ntk->sjk", _softmax_row_chain(b_mat, db_fix), xb_comp)
    d_gpi += np.einsum("ns,nk->sk", _softmax_row_chain(pi, dpi), x_pi)
    return total, d_gpi, d_ga, d_gb


# ---------------------------------------------------------------------------
# Dataset-level dispatch
# ---------------------------------------------------------------------------


def _length_groups(lengths: np.ndarray) -> list[tuple[int, np.ndarray]]:
    groups = []
    for length in np.unique(lengths):
        groups.append((int(length), np.nonzero(lengths == length)[0]))
    return groups


def _penalized(value: float, coeffs: CoefficientSet, penalty: float) -> float:
    if penalty:
        return value - 0.5 * penalty * coeffs.norm_sq()
    return value


def loglik_dataset(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    dataset: PanelDataset,
    penalty: float = 0.0,
) -> float:
    """Penalized log-likelihood of a dataset.

    The ridge penalty subtracts ``penalty/2`` times the squared norm of the
    unconstrained coefficients.
    """
    coeffs.validate_against(spec)
    dataset.validate_against(spec)
    gam = _gammas(coeffs)
    xa_comp, xb_comp = dataset.completed_designs()
    total = 0.0
    for length, idx in _length_groups(dataset.lengths):
        y = dataset.y[idx][:, :length]
        col_obs = _column_pattern(y)
        if col_obs is not None:
            ll, *_ = _forward_batch(
                spec,
                gam,
                y,
                col_obs,
                dataset.x_pi[idx],
                dataset.x_a[idx][:, :length],
                dataset.x_b[idx][:, :length],
                xa_comp[idx][:, :length],
                xb_comp[idx][:, :length],
            )
            total += float(ll.sum())
        else:
            for i in idx:
                ll, *_ = _forward_seq(
                    spec,
                    gam,
                    dataset.y[i, :length],
                    dataset.x_pi[i],
                    dataset.x_a[i, :length],
                    dataset.x_b[i, :length],
                )
                total += ll
    return _penalized(total, coeffs, penalty)


def loglik_and_gradient(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    dataset: PanelDataset,
    penalty: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Penalized log-likelihood and its gradient in packed order.

    Returns
    -------
    value : float
    gradient : np.ndarray, shape (n_params,)
        Packed like :func:`fanhmm.model.pack_params`; ``-inf`` values come
        with a zero gradient.
    """
    coeffs.validate_against(spec)
    dataset.validate_against(spec)
    gam = _gammas(coeffs)
    xa_comp, xb_comp = dataset.completed_designs()
    total = 0.0
    d_gpi = np.zeros_like(gam[0])
    d_ga = np.zeros_like(gam[1])
    d_gb = np.zeros_like(gam[2])
    for length, idx in _length_groups(dataset.lengths):
        y = dataset.y[idx][:, :length]
        col_obs = _column_pattern(y)
        if col_obs is not None:
            ll, gpi, ga, gb = _gradient_batch(
                spec,
                gam,
                y,
                col_obs,
                dataset.x_pi[idx],
                dataset.x_a[idx][:, :length],
                dataset.x_b[idx][:, :length],
                xa_comp[idx][:, :length],
                xb_comp[idx][:, :length],
            )
            total += ll
            d_gpi += gpi
            d_ga += ga
            d_gb += gb
        else:
            for i in idx:
                ll, gpi, ga, gb = _gradient_seq(
                    spec,
                    gam,
                    dataset.y[i, :length],
                    dataset.x_pi[i],
                    dataset.x_a[i, :length],
                    dataset.x_b[i, :length],
                )
                total += ll
                d_gpi += gpi
                d_ga += ga
                d_gb += gb
    if not np.isfinite(total):
        return -np.inf, np.zeros(spec.n_params)

    q_s, q_m = coeffs.basis_s.q, coeffs.basis_m.q
    grad_pi = q_s.T @ d_gpi - penalty * coeffs.eta_pi
    grad_a = np.einsum("ij,sik->sjk", q_s, d_ga) - penalty * coeffs.eta_a
    grad_b = np.einsum("ij,sik->sjk", q_m, d_gb) - penalty * coeffs.eta_b
    packed = np.concatenate(
        [grad_pi.ravel()]
        + [grad_a[s].ravel() for s in range(spec.n_states)]
        + [grad_b[s].ravel() for s in range(spec.n_states)]
    )
    return _penalized(total, coeffs, penalty), packed


def forward(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    dataset: PanelDataset,
    index: int,
    mask_times: Sequence[int] = (),
    stop_after: int | None = None,
) -> ForwardResult:
    """Forward pass over one sequence of a dataset.

    Parameters
    ----------
    index : int
        Sequence position in the dataset.
    mask_times : sequence of int
        One-based times whose responses are treated as missing, on top of
        any genuinely missing values.
    stop_after : int, optional
        One-based time at which to stop; the result covers times 1..stop.
    """
    coeffs.validate_against(spec)
    dataset.validate_against(spec)
    length = int(dataset.lengths[index])
    y = _apply_mask(dataset.y[index, :length], mask_times)
    loglik, alpha, d_all, scal, _, _, _ = _forward_seq(
        spec,
        _gammas(coeffs),
        y,
        dataset.x_pi[index],
        dataset.x_a[index, :length],
        dataset.x_b[index, :length],
        stop_after=stop_after,
    )
    return ForwardResult(loglik=loglik, alpha_norm=alpha, d=d_all, scaling_logs=scal)


# ---------------------------------------------------------------------------
# Backward smoothing and expected counts
# ---------------------------------------------------------------------------


def _require_smoothing_support(spec: ModelSpec, y: np.ndarray) -> None:
    """Smoothing needs every lag-consumed response to be observed."""
    if not (spec.lag_in_transition or spec.lag_in_emission):
        return
    t_n = len(y)
    missing = np.nonzero(y == MISSING)[0]
    consumed = missing[missing + 1 < t_n]
    if consumed.size:
        raise UnsupportedCaseError(
            "expectation steps need the previous response wherever the model "
            f"consumes it; response at time {int(consumed[0]) + 1} is missing "
            "but feeds a later time. Fit such data with method='direct'."
        )


def _seq_fixed_matrices(spec, gam, y, x_a, x_b):
    """Per-time transition/emission matrices with lags resolved from y."""
    g_pi, g_a, g_b = gam
    t_n = len(y)
    a_list = np.empty((t_n, spec.n_states, spec.n_states))
    b_list = np.empty((t_n, spec.n_states, spec.n_categories))
    for t in range(t_n):
        prev = int(y[t - 1]) if t > 0 else 1
        row_a = spec.a_design.complete(x_a[t], prev)
        row_b = spec.b_design.complete(x_b[t], prev)
        a_list[t] = softmax(g_a @ row_a, axis=-1)
        b_list[t] = softmax(g_b @ row_b, axis=-1)
    return a_list, b_list


def backward(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    dataset: PanelDataset,
    index: int,
) -> BackwardResult:
    """Scaled backward pass over one sequence.

    Scaling uses the forward normalizers, so ``alpha_norm * beta`` rows are
    smoothed state posteriors summing to one.
    """
    coeffs.validate_against(spec)
    dataset.validate_against(spec)
    length = int(dataset.lengths[index])
    y = dataset.y[index, :length]
    _require_smoothing_support(spec, y)
    gam = _gammas(coeffs)
    x_a = dataset.x_a[index, :length]
    x_b = dataset.x_b[index, :length]
    _, _, _, _, c_all, _, _ = _forward_seq(
        spec, gam, y, dataset.x_pi[index], x_a, x_b
    )
    a_list, b_list = _seq_fixed_matrices(spec, gam, y, x_a, x_b)
    beta = np.empty((length, spec.n_states))
    beta[length - 1] = 1.0
    for t in range(length - 2, -1, -1):
        if y[t + 1] != MISSING:
            bfac = b_list[t + 1][:, y[t + 1] - 1]
        else:
            bfac = np.ones(spec.n_states)
        beta[t] = a_list[t + 1] @ (bfac * beta[t + 1]) / c_all[t + 1]
    return BackwardResult(beta=beta)


def estep(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    dataset: PanelDataset,
    index: int,
) -> ExpectedCounts:
    """Expected sufficient statistics for one sequence."""
    coeffs.validate_against(spec)
    dataset.validate_against(spec)
    length = int(dataset.lengths[index])
    y = dataset.y[index, :length]
    _require_smoothing_support(spec, y)
    gam = _gammas(coeffs)
    x_a = dataset.x_a[index, :length]
    x_b = dataset.x_b[index, :length]
    loglik, alpha, _, _, c_all, _, _ = _forward_seq(
        spec, gam, y, dataset.x_pi[index], x_a, x_b
    )
    a_list, b_list = _seq_fixed_matrices(spec, gam, y, x_a, x_b)
    beta = backward(spec, coeffs, dataset, index).beta

    e_pi = alpha[0] * beta[0]
    e_a = np.zeros((length, spec.n_states, spec.n_states))
    e_b = np.zeros((length, spec.n_states))
    b_attached = np.zeros(length, dtype=bool)
    for t in range(length):
        if y[t] != MISSING and not (t == 0 and spec.lag_in_emission):
            e_b[t] = alpha[t] * beta[t]
            b_attached[t] = True
        if t > 0:
            if y[t] != MISSING:
                bfac = b_list[t][:, y[t] - 1]
            else:
                bfac = np.ones(spec.n_states)
            e_a[t] = (
                alpha[t - 1][:, None]
                * a_list[t]
                * (bfac * beta[t] / c_all[t])[None, :]
            )
    return ExpectedCounts(
        e_pi=e_pi, e_a=e_a, e_b=e_b, b_attached=b_attached, loglik=loglik
    )


def dataset_estep(
    spec: ModelSpec, coeffs: CoefficientSet, dataset: PanelDataset
) -> tuple[list[ExpectedCounts], float]:
    """Expected counts for every sequence, batched where the data allow.

    Returns the per-sequence counts and the total log-likelihood.
    """
    coeffs.validate_against(spec)
    dataset.validate_against(spec)
    gam = _gammas(coeffs)
    xa_comp, xb_comp = dataset.completed_designs()
    results: list[ExpectedCounts | None] = [None] * dataset.n_sequences
    total = 0.0
    for length, idx in _length_groups(dataset.lengths):
        y = dataset.y[idx][:, :length]
        for i in idx:
            _require_smoothing_support(spec, dataset.y[i, : dataset.lengths[i]])
        col_obs = _column_pattern(y)
        if col_obs is None:
            for i in idx:
                counts = estep(spec, coeffs, dataset, int(i))
                results[int(i)] = counts
                total += counts.loglik
            continue
        loglik, alpha, _, c_all, mats, _ = _forward_batch(
            spec,
            gam,
            y,
            col_obs,
            dataset.x_pi[idx],
            dataset.x_a[idx][:, :length],
            dataset.x_b[idx][:, :length],
            xa_comp[idx][:, :length],
            xb_comp[idx][:, :length],
        )
        _, a_mat, b_mat = mats
        n_g = len(idx)
        rows = np.arange(n_g)
        beta = np.empty((n_g, length, spec.n_states))
        beta[:, length - 1] = 1.0
        bfac_all = np.ones((n_g, length, spec.n_states))
        for t in range(length):
            if col_obs[t]:
                bfac_all[:, t] = b_mat[rows, t, :, y[:, t] - 1]
        for t in range(length - 2, -1, -1):
            beta[:, t] = (
                np.einsum(
                    "nsr,nr->ns", a_mat[:, t + 1], bfac_all[:, t + 1] * beta[:, t + 1]
                )
                / c_all[:, t + 1][:, None]
            )
        e_b_all = alpha * beta
        for pos, i in enumerate(idx):
            e_a = np.zeros((length, spec.n_states, spec.n_states))
            for t in range(1, length):
                e_a[t] = (
                    alpha[pos, t - 1][:, None]
                    * a_mat[pos, t]
                    * (bfac_all[pos, t] * beta[pos, t] / c_all[pos, t])[None, :]
                )
            b_attached = col_obs.copy()
            if spec.lag_in_emission:
                b_attached[0] = False
            e_b = np.where(b_attached[:, None], e_b_all[pos], 0.0)
            results[int(i)] = ExpectedCounts(
                e_pi=alpha[pos, 0] * beta[pos, 0],
                e_a=e_a,
                e_b=e_b,
                b_attached=b_attached,
                loglik=float(loglik[pos]),
            )
            total += float(loglik[pos])
    return results, total  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# M-step data and per-block objectives
# ---------------------------------------------------------------------------


@dataclass
class MStepData:
    """Expected counts flattened for the per-block M-step maximizations.

    Attributes
    ----------
    x_pi : np.ndarray, shape (N, K_pi)
    e_pi : np.ndarray, shape (N, S)
    xa_rows : np.ndarray, shape (R_a, K_A)
        Completed transition design rows for every sequence and time >= 2.
    ea_rows : np.ndarray, shape (R_a, S, S)
    xb_rows : np.ndarray, shape (R_b, K_B)
        Completed emission design rows wherever an emission term applies.
    eb_rows : np.ndarray, shape (R_b, S)
    yb_rows : np.ndarray, shape (R_b,)
        Observed categories (1..M) matching ``xb_rows``.
    """

    x_pi: np.ndarray
    e_pi: np.ndarray
    xa_rows: np.ndarray
    ea_rows: np.ndarray
    xb_rows: np.ndarray
    eb_rows: np.ndarray
    yb_rows: np.ndarray


def build_mstep_data(
    spec: ModelSpec, dataset: PanelDataset, counts: list[ExpectedCounts]
) -> MStepData:
    """Aggregate per-sequence expected counts into flat M-step arrays."""
    xa_comp, xb_comp = dataset.completed_designs()
    e_pi = np.stack([c.e_pi for c in counts])
    xa_rows, ea_rows = [], []
    xb_rows, eb_rows, yb_rows = [], [], []
    for i, c in enumerate(counts):
        length = int(dataset.lengths[i])
        if length > 1:
            xa_rows.append(xa_comp[i, 1:length])
            ea_rows.append(c.e_a[1:length])
        attach = np.nonzero(c.b_attached)[0]
        if attach.size:
            xb_rows.append(xb_comp[i, attach])
            eb_rows.append(c.e_b[attach])
            yb_rows.append(dataset.y[i, attach])
    k_a, k_b = spec.k_a, spec.k_b
    s_n = spec.n_states
    return MStepData(
        x_pi=dataset.x_pi,
        e_pi=e_pi,
        xa_rows=np.concatenate(xa_rows) if xa_rows else np.zeros((0, k_a)),
        ea_rows=np.concatenate(ea_rows) if ea_rows else np.zeros((0, s_n, s_n)),
        xb_rows=np.concatenate(xb_rows) if xb_rows else np.zeros((0, k_b)),
        eb_rows=np.concatenate(eb_rows) if eb_rows else np.zeros((0, s_n)),
        yb_rows=np.concatenate(yb_rows) if yb_rows else np.zeros(0, dtype=int),
    )


def pi_block_value_grad(
    eta_pi: np.ndarray,
    basis_q: np.ndarray,
    x_pi: np.ndarray,
    e_pi: np.ndarray,
    penalty: float,
) -> tuple[float, np.ndarray]:
    """Expected log-likelihood and gradient for the initial-state block."""
    gamma = basis_q @ eta_pi
    logits = x_pi @ gamma.T
    logp = log_softmax(logits, axis=1)
    value = float(np.sum(e_pi * logp)) - 0.5 * penalty * float(np.sum(eta_pi**2))
    probs = np.exp(logp)
    resid = e_pi - e_pi.sum(axis=1, keepdims=True) * probs
    grad = basis_q.T @ (resid.T @ x_pi) - penalty * eta_pi
    return value, grad


def a_block_value_grad(
    eta_s: np.ndarray,
    basis_q: np.ndarray,
    x_rows: np.ndarray,
    counts: np.ndarray,
    penalty: float,
) -> tuple[float, np.ndarray]:
    """Expected log-likelihood and gradient for one state's transition row.

    Parameters
    ----------
    counts : np.ndarray, shape (R, S)
        Expected transition counts out of this state per design row.
    """
    gamma = basis_q @ eta_s
    logits = x_rows @ gamma.T
    logp = log_softmax(logits, axis=1)
    value = float(np.sum(counts * logp)) - 0.5 * penalty * float(np.sum(eta_s**2))
    probs = np.exp(logp)
    resid = counts - counts.sum(axis=1, keepdims=True) * probs
    grad = basis_q.T @ (resid.T @ x_rows) - penalty * eta_s
    return value, grad


def b_block_value_grad(
    eta_s: np.ndarray,
    basis_q: np.ndarray,
    x_rows: np.ndarray,
    weights: np.ndarray,
    categories: np.ndarray,
    penalty: float,
) -> tuple[float, np.ndarray]:
    """Expected log-likelihood and gradient for one state's emission row.

    Parameters
    ----------
    weights : np.ndarray, shape (R,)
        Posterior weight of this state at each design row.
    categories : np.ndarray, shape (R,)
        Observed categories (1..M) at each design row.
    """
    gamma = basis_q @ eta_s
    logits = x_rows @ gamma.T
    logp = log_softmax(logits, axis=1)
    rows = np.arange(len(weights))
    value = float(np.sum(weights * logp[rows, categories - 1]))
    value -= 0.5 * penalty * float(np.sum(eta_s**2))
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    onehot[rows, categories - 1] = weights
    resid = onehot - weights[:, None] * probs
    grad = basis_q.T @ (resid.T @ x_rows) - penalty * eta_s
    return value, grad
