"""Dataset simulation and benchmark experiment drivers.

The sampler draws panels from any model in this package by ancestral
sampling: covariates first, then the initial state and first response,
then states and responses alternating forward through time with lag
columns filled from the realized history. True states stay on the
returned dataset for diagnostics. Benchmark builders provide reference
models with known probability tables; two experiment drivers measure
multistart optimization success and the accuracy of bootstrap intervals
for average causal effects. All randomness flows through named,
splittable streams, so parallel runs reproduce exactly.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed

from .causal import InterventionPlan, ace, bootstrap_effect_draws
from .design import make_design_info
from .errors import FanHmmError, ValidationError
from .estimation import SUCCESS_RTOL, FitOptions, fit, sample_initial_values
from .model import CoefficientSet, ModelSpec, PanelDataset
from .simplex import gamma_from_target_probs, gamma_to_eta, softmax

__all__ = [
    "DgpConfig",
    "ExperimentReport",
    "benchmark_dgp",
    "benchmark_model",
    "benchmark_tables",
    "covariate_process",
    "generate_covariate_ar",
    "intercept_benchmark_model",
    "rng_stream",
    "run_multistart_experiment",
    "run_rmse_coverage_experiment",
    "simulate_dataset",
]


def _path_word(element: int | str) -> int:
    """Map one stream-path element to a nonnegative integer key."""
    if isinstance(element, (bool, float)):
        raise ValidationError(
            f"stream path elements must be int or str, got {element!r}"
        )
    if isinstance(element, (int, np.integer)):
        if element < 0:
            raise ValidationError(f"stream path ints must be >= 0, got {element}")
        return int(element)
    if isinstance(element, str):
        digest = hashlib.sha256(element.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise ValidationError(f"stream path elements must be int or str, got {element!r}")


def rng_stream(seed: int, *path: int | str) -> np.random.Generator:
    """Independent, reproducible random stream addressed by a name path.

    Streams with different paths are statistically independent; the same
    ``(seed, path)`` always yields the same stream, regardless of how many
    other streams were created. Counter-based bit generation keeps this
    safe under any parallel schedule.

    Parameters
    ----------
    seed : int
        Root seed shared by every stream of one run.
    *path : int or str
        Address of the stream, e.g. ``("replication", 3, "bootstrap")``.
    """
    key = tuple(_path_word(p) for p in path)
    seq = np.random.SeedSequence(seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def generate_covariate_ar(
    n: int,
    t: int,
    rng: np.random.Generator,
    level_sd: float = 0.5,
    slope_range: float = 0.05,
    noise_sd: float = 0.1,
) -> np.ndarray:
    """Per-sequence linear-trend covariate with observation noise.

    Each sequence i draws a level ``u_i ~ N(0, level_sd^2)`` and a slope
    ``v_i`` uniform on ``(-slope_range, slope_range)``; the value at time t
    (1-based) is ``u_i + v_i t`` plus ``N(0, noise_sd^2)`` noise.

    Returns
    -------
    np.ndarray, shape (n, t)
    """
    u = rng.normal(0.0, level_sd, size=n)
    v = rng.uniform(-slope_range, slope_range, size=n)
    steps = np.arange(1, t + 1)
    mean = u[:, None] + v[:, None] * steps[None, :]
    return mean + rng.normal(0.0, noise_sd, size=(n, t))


def covariate_process(name: str, **params) -> Callable:
    """Named covariate generator usable in a :class:`DgpConfig`.

    Known processes:

    - ``"trend_normal"``: :func:`generate_covariate_ar`; accepts
      ``level_sd``, ``slope_range``, ``noise_sd``.
    - ``"bernoulli"``: 0/1 draws with success probability ``p`` (default
      0.5); ``per_sequence=True`` (default) draws once per sequence and
      repeats it over time.
    - ``"step"``: 0 before ``switch_time`` (1-based), 1 from it onward.

    Returns
    -------
    callable ``(n, t, rng) -> np.ndarray of shape (n, t)``
    """
    if name == "trend_normal":

        def trend(n, t, rng):
            return generate_covariate_ar(n, t, rng, **params)

        return trend
    if name == "bernoulli":
        p = float(params.pop("p", 0.5))
        per_sequence = bool(params.pop("per_sequence", True))
        if params:
            raise ValidationError(
                f"unknown parameters {sorted(params)} for 'bernoulli'"
            )
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"p must lie in [0, 1], got {p}")

        def bernoulli(n, t, rng):
            if per_sequence:
                draw = (rng.random(n) < p).astype(float)
                return np.repeat(draw[:, None], t, axis=1)
            return (rng.random((n, t)) < p).astype(float)

        return bernoulli
    if name == "step":
        switch_time = int(params.pop("switch_time"))
        if params:
            raise ValidationError(f"unknown parameters {sorted(params)} for 'step'")
        if switch_time < 1:
            raise ValidationError(f"switch_time must be >= 1, got {switch_time}")

        def step(n, t, rng):
            row = (np.arange(1, t + 1) >= switch_time).astype(float)
            return np.repeat(row[None, :], n, axis=0)

        return step
    raise ValidationError(
        f"unknown covariate process {name!r}; known: "
        "'trend_normal', 'bernoulli', 'step'"
    )


@dataclass(frozen=True)
class DgpConfig:
    """A data-generating process: model, panel size, covariates, seed.

    Attributes
    ----------
    spec, coeffs
        The generating model.
    n_sequences, n_periods : int
        Panel dimensions; both at least 1. All sequences share the length.
    covariates : mapping of str to generator
        One entry per covariate column used by any design. A generator is
        a callable ``(n, t, rng) -> (n, t) array``, or a scalar/array
        broadcastable to ``(n, t)``.
    seed : int
        Root seed; every random draw descends from it through named
        streams, so equal configs simulate identical panels.
    """

    spec: ModelSpec
    coeffs: CoefficientSet
    n_sequences: int
    n_periods: int
    covariates: Mapping[str, object] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_sequences < 1:
            raise ValidationError(
                f"n_sequences must be >= 1, got {self.n_sequences}"
            )
        if self.n_periods < 1:
            raise ValidationError(f"n_periods must be >= 1, got {self.n_periods}")
        self.coeffs.validate_against(self.spec)
        needed = {
            col.name
            for design in (
                self.spec.pi_design,
                self.spec.a_design,
                self.spec.b_design,
            )
            for col in design.columns
            if col.kind == "covariate"
        }
        missing = sorted(needed - set(self.covariates))
        if missing:
            raise ValidationError(
                f"no generator for covariates {missing}; add them to covariates"
            )


def _materialize(generator, n: int, t: int, rng: np.random.Generator) -> np.ndarray:
    if callable(generator):
        values = np.asarray(generator(n, t, rng), dtype=float)
    else:
        values = np.asarray(generator, dtype=float)
    try:
        values = np.broadcast_to(values, (n, t)).astype(float)
    except ValueError:
        raise ValidationError(
            f"covariate values of shape {values.shape} do not broadcast to "
            f"({n}, {t})"
        ) from None
    if not np.all(np.isfinite(values)):
        raise ValidationError("covariate values must be finite")
    return values


def _sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs``; returns 0-based indices."""
    u = rng.random(probs.shape[0])
    picks = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(picks, probs.shape[1] - 1)


def simulate_dataset(config: DgpConfig) -> PanelDataset:
    """Sample a complete panel from the configured model.

    Covariates are drawn first (one named stream per covariate), then for
    each sequence the initial state, the first response, and alternating
    states and responses forward in time. Lag columns in the designs are
    evaluated against the realized previous response; the first response,
    which has no predecessor, uses the reference category.

    Returns
    -------
    PanelDataset
        Complete responses, with ``states`` holding the true state codes
        1..S and ``covariates`` the raw generated values.
    """
    spec, coeffs = config.spec, config.coeffs
    n, t_n = config.n_sequences, config.n_periods

    raw = {
        name: _materialize(
            config.covariates[name], n, t_n, rng_stream(config.seed, "covariate", name)
        )
        for name in sorted(config.covariates)
    }
    raw_first = {name: values[:, 0] for name, values in raw.items()}
    x_pi = spec.pi_design.assemble(raw_first, (n,))
    x_a = spec.a_design.assemble(raw, (n, t_n))
    x_b = spec.b_design.assemble(raw, (n, t_n))

    gam_pi = coeffs.gamma_pi()
    gam_a = coeffs.gamma_a()
    gam_b = coeffs.gamma_b()
    rng = rng_stream(config.seed, "paths")

    z = np.zeros((n, t_n), dtype=int)
    y = np.zeros((n, t_n), dtype=int)

    z[:, 0] = _sample_rows(rng, softmax(x_pi @ gam_pi.T, axis=1))
    rows_b = spec.b_design.complete(x_b[:, 0, :], 1)
    emit = softmax(np.einsum("nmk,nk->nm", gam_b[z[:, 0]], rows_b), axis=1)
    y[:, 0] = 1 + _sample_rows(rng, emit)

    for t in range(1, t_n):
        y_prev = y[:, t - 1]
        rows_a = spec.a_design.complete(x_a[:, t, :], y_prev)
        move = softmax(np.einsum("nsk,nk->ns", gam_a[z[:, t - 1]], rows_a), axis=1)
        z[:, t] = _sample_rows(rng, move)
        rows_b = spec.b_design.complete(x_b[:, t, :], y_prev)
        emit = softmax(np.einsum("nmk,nk->nm", gam_b[z[:, t]], rows_b), axis=1)
        y[:, t] = 1 + _sample_rows(rng, emit)

    return PanelDataset(
        y=y,
        lengths=np.full(n, t_n, dtype=int),
        x_pi=x_pi,
        x_a=x_a,
        x_b=x_b,
        pi_design=spec.pi_design,
        a_design=spec.a_design,
        b_design=spec.b_design,
        n_categories=spec.n_categories,
        covariates=raw,
        states=z + 1,
    )


# Reference probability tables for the benchmark models. The three-state
# variant has four response categories; the wider one has four states and
# six categories with a less sticky state 2 and overlapping emissions.
_PI3 = np.array([0.8, 0.1, 0.1])
_A3 = np.array(
    [
        [0.85, 0.10, 0.05],
        [0.10, 0.80, 0.10],
        [0.05, 0.05, 0.90],
    ]
)
_B3 = np.array(
    [
        [0.80, 0.05, 0.10, 0.05],
        [0.15, 0.50, 0.25, 0.10],
        [0.10, 0.05, 0.25, 0.60],
    ]
)
_PI4 = np.array([0.8, 0.1, 0.05, 0.05])
_A4 = np.array(
    [
        [0.800, 0.100, 0.050, 0.050],
        [0.100, 0.700, 0.100, 0.100],
        [0.050, 0.050, 0.800, 0.100],
        [0.025, 0.050, 0.025, 0.900],
    ]
)
_B4 = np.array(
    [
        [0.50, 0.10, 0.10, 0.05, 0.05, 0.20],
        [0.10, 0.50, 0.10, 0.10, 0.10, 0.10],
        [0.20, 0.05, 0.30, 0.30, 0.05, 0.10],
        [0.05, 0.05, 0.10, 0.30, 0.40, 0.10],
    ]
)

# Default treatment effects of the benchmark model, one row per state.
# Entries come from {-1, 0, 1}; each row sums to zero so it is a valid
# sum-to-zero coefficient column. The response effect pushes toward
# category 2 in states 1 and 2 but not in state 3, which makes the
# number of states matter for the effect on category 2.
_X_TO_STATE = np.array(
    [
        [1.0, 0.0, -1.0],
        [0.0, 1.0, -1.0],
        [1.0, -1.0, 0.0],
    ]
)
_X_TO_RESPONSE = np.array(
    [
        [-1.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, -1.0],
        [-1.0, 0.0, 1.0, 0.0],
    ]
)


def benchmark_tables(n_states: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reference probability tables (initial, transition, emission).

    Two variants exist: ``n_states=3`` with four response categories and
    ``n_states=4`` with six.
    """
    if n_states == 3:
        return _PI3.copy(), _A3.copy(), _B3.copy()
    if n_states == 4:
        return _PI4.copy(), _A4.copy(), _B4.copy()
    raise ValidationError(f"benchmark tables exist for 3 or 4 states, got {n_states}")


def intercept_benchmark_model(n_states: int = 3) -> tuple[ModelSpec, CoefficientSet]:
    """Benchmark model with constant probabilities and no feedback.

    Intercept-only designs whose rows reproduce :func:`benchmark_tables`
    exactly, useful for closed-form checks and parameter-recovery tests.
    """
    pi_t, a_t, b_t = benchmark_tables(n_states)
    m_n = b_t.shape[1]
    design = make_design_info()
    spec = ModelSpec(
        n_states=n_states,
        n_categories=m_n,
        pi_design=design,
        a_design=design,
        b_design=design,
    )
    coeffs = CoefficientSet.zeros(spec)
    coeffs.eta_pi[:, 0] = gamma_to_eta(
        gamma_from_target_probs(pi_t)[:, None], coeffs.basis_s
    )[:, 0]
    for s in range(n_states):
        coeffs.eta_a[s, :, 0] = gamma_to_eta(
            gamma_from_target_probs(a_t[s])[:, None], coeffs.basis_s
        )[:, 0]
        coeffs.eta_b[s, :, 0] = gamma_to_eta(
            gamma_from_target_probs(b_t[s])[:, None], coeffs.basis_m
        )[:, 0]
    return spec, coeffs


def benchmark_model(
    x_scale: float = 1.0, lag_scale: float = 1.0
) -> tuple[ModelSpec, CoefficientSet]:
    """Three-state benchmark with a covariate and feedback on both layers.

    The designs are ``[intercept, x, lag indicators]`` for transitions and
    emissions and intercept-only for the initial state. Intercept columns
    reproduce the three-state :func:`benchmark_tables` when ``x = 0`` and
    the previous response is the reference category.

    Default effect assignment (all sum-to-zero columns):

    - covariate-to-state and covariate-to-response columns hold the rows
      of the module's effect tables, entries in {-1, 0, 1}, scaled by
      ``x_scale``;
    - a previous response m pulls the next state toward state
      ``min(m - 1, S)`` with a (-0.5, +0.5) column scaled by ``lag_scale``;
    - a previous response m raises the probability of repeating m with a
      (-0.5 on category 1, +0.5 on m) column scaled by ``lag_scale``.

    Other assignments with the same structure can be made by editing the
    returned coefficients; the scales are the most useful knobs.
    """
    s_n, m_n = 3, 4
    pi_design = make_design_info()
    a_design = make_design_info(
        covariates=("x",), n_categories=m_n, include_lag=True
    )
    b_design = make_design_info(
        covariates=("x",), n_categories=m_n, include_lag=True
    )
    spec = ModelSpec(
        n_states=s_n,
        n_categories=m_n,
        pi_design=pi_design,
        a_design=a_design,
        b_design=b_design,
    )
    coeffs = CoefficientSet.zeros(spec)
    coeffs.eta_pi[:, 0] = gamma_to_eta(
        gamma_from_target_probs(_PI3)[:, None], coeffs.basis_s
    )[:, 0]
    for s in range(s_n):
        gam_a = np.zeros((s_n, spec.k_a))
        gam_a[:, 0] = gamma_from_target_probs(_A3[s])
        gam_a[:, 1] = _X_TO_STATE[s] * x_scale
        for j, m in enumerate(range(2, m_n + 1)):
            gam_a[0, 2 + j] -= 0.5 * lag_scale
            gam_a[min(m - 1, s_n - 1), 2 + j] += 0.5 * lag_scale
        coeffs.eta_a[s] = gamma_to_eta(gam_a, coeffs.basis_s)

        gam_b = np.zeros((m_n, spec.k_b))
        gam_b[:, 0] = gamma_from_target_probs(_B3[s])
        gam_b[:, 1] = _X_TO_RESPONSE[s] * x_scale
        for j, m in enumerate(range(2, m_n + 1)):
            gam_b[0, 2 + j] -= 0.5 * lag_scale
            gam_b[m - 1, 2 + j] += 0.5 * lag_scale
        coeffs.eta_b[s] = gamma_to_eta(gam_b, coeffs.basis_m)
    return spec, coeffs


def benchmark_dgp(
    n_sequences: int = 200,
    n_periods: int = 20,
    seed: int = 0,
    x_scale: float = 1.0,
    lag_scale: float = 1.0,
) -> DgpConfig:
    """Benchmark model wired to the trend-normal covariate process."""
    spec, coeffs = benchmark_model(x_scale=x_scale, lag_scale=lag_scale)
    return DgpConfig(
        spec=spec,
        coeffs=coeffs,
        n_sequences=n_sequences,
        n_periods=n_periods,
        covariates={"x": generate_covariate_ar},
        seed=seed,
    )


@dataclass
class ExperimentReport:
    """Tabular experiment output with CSV export.

    Attributes
    ----------
    kind : str
        ``"multistart"`` or ``"rmse-coverage"``.
    columns : tuple of str
        Column order for export.
    rows : list of dict
        One entry per configuration; keys equal ``columns``. Columns whose
        name ends in ``_seconds`` hold wall times and are the only values
        that may differ between reruns with equal seeds.
    """

    kind: str
    columns: tuple[str, ...]
    rows: list[dict]

    def __post_init__(self) -> None:
        for row in self.rows:
            if set(row) != set(self.columns):
                raise ValidationError(
                    f"report row keys {sorted(row)} do not match columns "
                    f"{sorted(self.columns)}"
                )
            for key, value in row.items():
                if ("rate" in key or "coverage" in key) and value is not None:
                    if np.isfinite(value) and not 0.0 <= value <= 1.0:
                        raise ValidationError(
                            f"{key} must lie in [0, 1], got {value}"
                        )

    def drop_timing(self) -> "ExperimentReport":
        """Copy without wall-time columns, for run-to-run comparisons."""
        keep = tuple(c for c in self.columns if not c.endswith("_seconds"))
        rows = [{k: row[k] for k in keep} for row in self.rows]
        return ExperimentReport(kind=self.kind, columns=keep, rows=rows)

    def to_csv(self, path) -> None:
        """Write UTF-8 comma-separated rows; missing values become NA."""
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_format_cell(row[c]) for c in self.columns])

    def to_frame(self):
        """Rows as a pandas DataFrame in column order."""
        import pandas as pd

        return pd.DataFrame(self.rows, columns=list(self.columns))


def _format_cell(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            return "NA" if np.isnan(value) else format(float(value), ".17g")
        return format(float(value), ".17g")
    return str(value)


def _with_states(spec: ModelSpec, n_states: int) -> ModelSpec:
    return ModelSpec(
        n_states=n_states,
        n_categories=spec.n_categories,
        pi_design=spec.pi_design,
        a_design=spec.a_design,
        b_design=spec.b_design,
    )


def _penalty_key(value: float) -> str:
    return format(float(value), ".17g")


def _one_multistart_fit(spec, dataset, options, start):
    began = time.perf_counter()
    try:
        result = fit(spec, dataset, options, initial=start)
        return result.objective, time.perf_counter() - began
    except FanHmmError:
        return -np.inf, time.perf_counter() - began


def run_multistart_experiment(
    dgp: DgpConfig,
    state_grid: Sequence[int],
    penalty_grid: Sequence[float],
    n_replications: int,
    methods: Sequence[str] = ("direct", "hybrid"),
    fit_options: FitOptions | None = None,
    n_jobs: int = 1,
) -> ExperimentReport:
    """Success rates of single-start fits on one simulated dataset.

    One panel is simulated from ``dgp``. For every combination of state
    count and penalty, ``n_replications`` initial values are sampled once
    and every method runs a single optimization from each of them, so the
    methods face identical starting points. A run succeeds when its final
    objective lies within a relative gap of 1e-5 of the best objective
    found by any method and any replication at that state count and
    penalty.

    Returns
    -------
    ExperimentReport
        One row per (state count, penalty, method) with the success rate
        and mean wall time per fit.
    """
    state_grid = list(state_grid)
    penalty_grid = [float(v) for v in penalty_grid]
    methods = list(methods)
    if not state_grid or not penalty_grid or not methods:
        raise ValidationError("state_grid, penalty_grid, and methods must be nonempty")
    if n_replications < 1:
        raise ValidationError(f"n_replications must be >= 1, got {n_replications}")
    base = fit_options or FitOptions()

    dataset = simulate_dataset(dgp)
    jobs = []
    for s_n in state_grid:
        spec_s = _with_states(dgp.spec, s_n)
        for lam in penalty_grid:
            starts = sample_initial_values(
                spec_s,
                n_replications,
                base.init_sd,
                rng_stream(dgp.seed, "multistart-inits", s_n, _penalty_key(lam)),
            )
            options = {
                name: replace(base, method=name, penalty=lam, n_starts=0, n_jobs=1)
                for name in methods
            }
            for name in methods:
                for start in starts:
                    jobs.append((spec_s, dataset, options[name], start))

    if n_jobs != 1 and len(jobs) > 1:
        outcomes = Parallel(n_jobs=n_jobs)(
            delayed(_one_multistart_fit)(*job) for job in jobs
        )
    else:
        outcomes = [_one_multistart_fit(*job) for job in jobs]

    columns = (
        "n_states",
        "penalty",
        "method",
        "success_rate",
        "mean_seconds",
        "best_objective",
        "n_replications",
    )
    rows = []
    cursor = 0
    per_cell = len(methods) * n_replications
    for s_n in state_grid:
        for lam in penalty_grid:
            cell = outcomes[cursor : cursor + per_cell]
            cursor += per_cell
            values = np.array([v for v, _ in cell])
            finite = values[np.isfinite(values)]
            best = float(finite.max()) if finite.size else np.nan
            for j, name in enumerate(methods):
                chunk = values[j * n_replications : (j + 1) * n_replications]
                seconds = [
                    t for _, t in cell[j * n_replications : (j + 1) * n_replications]
                ]
                if np.isfinite(best):
                    gap = best - chunk
                    won = (gap < SUCCESS_RTOL * abs(best)) | (gap == 0)
                    rate = float(np.mean(won))
                else:
                    rate = 0.0
                rows.append(
                    {
                        "n_states": s_n,
                        "penalty": lam,
                        "method": name,
                        "success_rate": rate,
                        "mean_seconds": float(np.mean(seconds)),
                        "best_objective": best,
                        "n_replications": n_replications,
                    }
                )
    return ExperimentReport(kind="multistart", columns=columns, rows=rows)


def _derived_seed(seed: int, *path) -> int:
    return int(rng_stream(seed, *path).integers(0, 2**63))


def _plan_pairs(
    covariate: str,
    intervention_time: int,
    horizons: Sequence[int],
    treated_value: float,
    control_value: float,
    mode: str,
) -> list[tuple[InterventionPlan, InterventionPlan]]:
    pairs = []
    for h in horizons:
        pairs.append(
            (
                InterventionPlan(
                    covariates={covariate: treated_value},
                    time=intervention_time,
                    horizon=h,
                    mode=mode,
                ),
                InterventionPlan(
                    covariates={covariate: control_value},
                    time=intervention_time,
                    horizon=h,
                    mode=mode,
                ),
            )
        )
    return pairs


def _one_coverage_cell(
    dgp,
    s_n,
    rep,
    pairs,
    options,
    bootstrap_options,
    n_boot,
    level,
    n_random_starts,
    evaluate_on_original,
):
    """Fit one replication at one state count and bootstrap its effects.

    Returns (points, lower, upper, n_dropped, seconds) with the first
    three shaped (n_pairs, M), or an error message string on failure.
    With ``n_boot == 0`` the interval bounds are NaN (point errors only).
    """
    began = time.perf_counter()
    data = simulate_dataset(
        replace(dgp, seed=_derived_seed(dgp.seed, "replication-data", rep))
    )
    spec_s = _with_states(dgp.spec, s_n)
    try:
        fitted = fit(
            spec_s,
            data,
            options,
            seed=rng_stream(dgp.seed, "replication-fit", rep, s_n),
        )
        points = np.stack(
            [
                ace(spec_s, fitted.coeffs, data, treated, control).effect
                for treated, control in pairs
            ]
        )
        if n_boot == 0:
            shape = (len(pairs), spec_s.n_categories)
            return points, np.full(shape, np.nan), np.full(shape, np.nan), 0, (
                time.perf_counter() - began
            )
        raw = bootstrap_effect_draws(
            spec_s,
            data,
            fitted.coeffs,
            pairs,
            n_boot=n_boot,
            seed=_derived_seed(dgp.seed, "replication-boot", rep, s_n),
            fit_options=bootstrap_options,
            n_random_starts=n_random_starts,
            evaluate_on_original=evaluate_on_original,
        )
    except FanHmmError as exc:
        return f"replication {rep} at {s_n} states failed: {exc}"
    alpha = (1.0 - level) / 2.0
    lower = np.quantile(raw.effects, alpha, axis=0)
    upper = np.quantile(raw.effects, 1.0 - alpha, axis=0)
    return points, lower, upper, raw.n_dropped, time.perf_counter() - began


def run_rmse_coverage_experiment(
    dgp: DgpConfig,
    state_grid: Sequence[int],
    horizons: Sequence[int],
    n_replications: int,
    n_boot: int = 50,
    covariate: str = "x",
    treated_value: float = 1.0,
    control_value: float = 0.0,
    intervention_time: int | None = None,
    mode: str = "recurring",
    level: float = 0.9,
    truth: np.ndarray | None = None,
    truth_sequences: int = 20_000,
    fit_options: FitOptions | None = None,
    bootstrap_fit_options: FitOptions | None = None,
    n_random_starts: int = 0,
    evaluate_on_original: bool = False,
    n_jobs: int = 1,
) -> ExperimentReport:
    """Error and interval coverage of estimated average causal effects.

    The target is the effect of holding ``covariate`` at ``treated_value``
    versus ``control_value`` from ``intervention_time`` onward, read off
    at each requested horizon. Ground truth comes from the generating
    model on a large simulated panel (or is supplied). Each replication
    simulates a fresh panel, fits a model per state count, estimates the
    effects, and wraps them in percentile bootstrap intervals; the report
    aggregates root-mean-square error of the point estimates and the
    fraction of intervals covering the truth.

    Parameters
    ----------
    truth : np.ndarray, optional, shape (n_horizons, M)
        Known effects per horizon and category; computed when omitted.
    bootstrap_fit_options : FitOptions, optional
        Settings for the bootstrap refits; defaults to ``fit_options``. A
        looser optimizer tolerance here buys large speedups because the
        refits start warm. ``n_boot=0`` skips intervals entirely and
        reports NaN coverage.
    n_random_starts : int
        Extra random starts per bootstrap refit on top of the warm start.

    Returns
    -------
    ExperimentReport
        One row per (state count, horizon, category).
    """
    state_grid = list(state_grid)
    horizons = [int(h) for h in horizons]
    if not state_grid or not horizons:
        raise ValidationError("state_grid and horizons must be nonempty")
    if n_replications < 1:
        raise ValidationError(f"n_replications must be >= 1, got {n_replications}")
    if n_boot < 0:
        raise ValidationError(f"n_boot must be >= 0, got {n_boot}")
    if intervention_time is None:
        intervention_time = dgp.n_periods - max(horizons)
    if intervention_time < 1 or intervention_time + max(horizons) > dgp.n_periods:
        raise ValidationError(
            f"intervention at time {intervention_time} with horizons {horizons} "
            f"does not fit in {dgp.n_periods} periods"
        )
    options = fit_options or FitOptions(method="direct", penalty=0.1, n_starts=5)
    bootstrap_options = bootstrap_fit_options or options
    m_n = dgp.spec.n_categories
    pairs = _plan_pairs(
        covariate, intervention_time, horizons, treated_value, control_value, mode
    )

    if truth is None:
        big = simulate_dataset(
            replace(
                dgp,
                n_sequences=truth_sequences,
                seed=_derived_seed(dgp.seed, "truth"),
            )
        )
        truth = np.stack(
            [
                ace(dgp.spec, dgp.coeffs, big, treated, control).effect
                for treated, control in pairs
            ]
        )
    truth = np.asarray(truth, dtype=float)
    if truth.shape != (len(horizons), m_n):
        raise ValidationError(
            f"truth must have shape ({len(horizons)}, {m_n}), got {truth.shape}"
        )

    cells = [(s_n, rep) for s_n in state_grid for rep in range(n_replications)]
    worker_args = [
        (
            dgp,
            s_n,
            rep,
            pairs,
            options,
            bootstrap_options,
            n_boot,
            level,
            n_random_starts,
            evaluate_on_original,
        )
        for s_n, rep in cells
    ]
    if n_jobs != 1 and len(cells) > 1:
        outcomes = Parallel(n_jobs=n_jobs)(
            delayed(_one_coverage_cell)(*args) for args in worker_args
        )
    else:
        outcomes = [_one_coverage_cell(*args) for args in worker_args]

    columns = (
        "n_states",
        "horizon",
        "category",
        "truth",
        "rmse",
        "coverage",
        "n_used",
        "mean_seconds",
    )
    rows = []
    for i, s_n in enumerate(state_grid):
        cell = outcomes[i * n_replications : (i + 1) * n_replications]
        kept = [c for c in cell if not isinstance(c, str)]
        n_used = len(kept)
        seconds = float(np.mean([c[4] for c in kept])) if kept else np.nan
        if kept:
            points = np.stack([c[0] for c in kept])
            lower = np.stack([c[1] for c in kept])
            upper = np.stack([c[2] for c in kept])
        for j, h in enumerate(horizons):
            for m in range(m_n):
                if kept:
                    errors = points[:, j, m] - truth[j, m]
                    rmse = float(np.sqrt(np.mean(errors**2)))
                    covered = (lower[:, j, m] <= truth[j, m]) & (
                        truth[j, m] <= upper[:, j, m]
                    )
                    coverage = float(np.mean(covered))
                else:
                    rmse = np.nan
                    coverage = np.nan
                rows.append(
                    {
                        "n_states": s_n,
                        "horizon": h,
                        "category": m + 1,
                        "truth": float(truth[j, m]),
                        "rmse": rmse,
                        "coverage": coverage,
                        "n_used": n_used,
                        "mean_seconds": seconds,
                    }
                )
    return ExperimentReport(kind="rmse-coverage", columns=columns, rows=rows)
