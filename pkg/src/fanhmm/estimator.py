"""Scikit-learn style estimator facade over the fitting machinery.

:class:`FanHmmEstimator` follows the familiar conventions — constructor
stores hyperparameters untouched, ``fit`` learns attributes with trailing
underscores, ``get_params``/``set_params`` round-trip, ``score`` returns
a number where higher is better — while operating on
:class:`~fanhmm.model.PanelDataset` panels instead of flat feature
matrices. No scikit-learn import is required.
"""

from __future__ import annotations

import inspect

import numpy as np

from .causal import InterventionPlan, ace, bootstrap_ci
from .errors import ValidationError
from .estimation import FitOptions, fit as fit_model
from .inference import forward, loglik_dataset
from .model import ModelSpec, PanelDataset

__all__ = ["FanHmmEstimator"]


class FanHmmEstimator:
    """Feedback-augmented non-homogeneous hidden Markov model estimator.

    Parameters mirror :class:`~fanhmm.estimation.FitOptions` plus the
    state count; the model structure (covariates, lagged-response edges)
    comes from the dataset's design metadata, so panels loaded through
    :func:`~fanhmm.data.load_dataset` or built by the simulation helpers
    fit without further configuration.

    Attributes (after ``fit``)
    --------------------------
    spec_ : ModelSpec
        Structure the panel implied at ``n_states`` states.
    coefficients_ : CoefficientSet
        Estimated unconstrained coefficients.
    loglik_ : float
        Unpenalized log-likelihood at the estimate.
    objective_ : float
        Penalized objective used for multistart comparison.
    result_ : FitResult
        Full multistart bookkeeping.
    """

    def __init__(
        self,
        n_states: int = 2,
        method: str = "direct",
        penalty: float = 0.0,
        n_starts: int = 1,
        init_sd: float = 2.0,
        max_em_iter: int = 100,
        em_tol: float = 1e-8,
        max_iter: int = 10_000,
        ftol: float = 1e-8,
        n_jobs: int = 1,
        random_state: int | None = None,
    ):
        self.n_states = n_states
        self.method = method
        self.penalty = penalty
        self.n_starts = n_starts
        self.init_sd = init_sd
        self.max_em_iter = max_em_iter
        self.em_tol = em_tol
        self.max_iter = max_iter
        self.ftol = ftol
        self.n_jobs = n_jobs
        self.random_state = random_state

    # -- scikit-learn parameter protocol ----------------------------------

    @classmethod
    def _param_names(cls) -> tuple[str, ...]:
        signature = inspect.signature(cls.__init__)
        return tuple(name for name in signature.parameters if name != "self")

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "FanHmmEstimator":
        valid = self._param_names()
        for name, value in params.items():
            if name not in valid:
                raise ValidationError(
                    f"unknown parameter {name!r}; valid parameters: {list(valid)}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        defaults = {
            name: parameter.default
            for name, parameter in inspect.signature(
                type(self).__init__
            ).parameters.items()
            if name != "self"
        }
        shown = ", ".join(
            f"{name}={getattr(self, name)!r}"
            for name in self._param_names()
            if getattr(self, name) != defaults[name]
        )
        return f"FanHmmEstimator({shown})"

    # -- fitting -----------------------------------------------------------

    def _options(self) -> FitOptions:
        return FitOptions(
            method=self.method,
            penalty=self.penalty,
            n_starts=self.n_starts,
            init_sd=self.init_sd,
            max_em_iter=self.max_em_iter,
            em_tol=self.em_tol,
            max_iter=self.max_iter,
            ftol=self.ftol,
            n_jobs=self.n_jobs,
        )

    @staticmethod
    def _check_dataset(dataset) -> PanelDataset:
        if not isinstance(dataset, PanelDataset):
            raise ValidationError(
                f"expected a PanelDataset, got {type(dataset).__name__}; load "
                f"panels with fanhmm.data.load_dataset or build them with the "
                f"simulation helpers"
            )
        return dataset

    def fit(self, X: PanelDataset, y=None) -> "FanHmmEstimator":
        """Estimate coefficients on a panel; ``y`` is ignored.

        The responses live inside the panel, so there is no separate
        target argument.
        """
        dataset = self._check_dataset(X)
        if not isinstance(self.n_states, int) or isinstance(self.n_states, bool):
            raise ValidationError(f"n_states must be an int, got {self.n_states!r}")
        spec = ModelSpec(
            n_states=self.n_states,
            n_categories=dataset.n_categories,
            pi_design=dataset.pi_design,
            a_design=dataset.a_design,
            b_design=dataset.b_design,
        )
        result = fit_model(spec, dataset, self._options(), seed=self.random_state)
        self.spec_ = spec
        self.coefficients_ = result.coeffs
        self.loglik_ = result.loglik
        self.objective_ = result.objective
        self.result_ = result
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "coefficients_"):
            raise ValidationError(
                "this FanHmmEstimator is not fitted yet; call fit first"
            )

    # -- inference ---------------------------------------------------------

    def score(self, X: PanelDataset, y=None) -> float:
        """Mean log-likelihood per sequence (higher is better)."""
        self._require_fitted()
        dataset = self._check_dataset(X)
        total = loglik_dataset(self.spec_, self.coefficients_, dataset)
        return total / dataset.n_sequences

    def predict_state_proba(self, X: PanelDataset) -> np.ndarray:
        """Filtered state probabilities, shape (N, T_max, n_states).

        Entry ``[i, t]`` is the state distribution at time t + 1 given the
        sequence's responses up to that time; rows past a sequence's
        length are NaN.
        """
        self._require_fitted()
        dataset = self._check_dataset(X)
        n, t_max = dataset.y.shape
        out = np.full((n, t_max, self.spec_.n_states), np.nan)
        for i in range(n):
            length = int(dataset.lengths[i])
            out[i, :length] = forward(
                self.spec_, self.coefficients_, dataset, i
            ).alpha_norm
        return out

    def predict(self, X: PanelDataset) -> np.ndarray:
        """Most probable filtered state (1-based) at each time point.

        Entries past a sequence's length are 0.
        """
        proba = self.predict_state_proba(X)
        states = np.zeros(proba.shape[:2], dtype=int)
        observed = ~np.isnan(proba[..., 0])
        states[observed] = np.argmax(proba[observed], axis=-1) + 1
        return states

    # -- causal conveniences -------------------------------------------------

    def average_effect(
        self,
        X: PanelDataset,
        treated: InterventionPlan,
        control: InterventionPlan,
        allow_truncation: bool = False,
    ):
        """Average causal effect of ``treated`` vs ``control`` on this panel."""
        self._require_fitted()
        dataset = self._check_dataset(X)
        return ace(
            self.spec_, self.coefficients_, dataset, treated, control,
            allow_truncation,
        )

    def bootstrap_effect(
        self,
        X: PanelDataset,
        treated: InterventionPlan,
        control: InterventionPlan,
        n_boot: int = 50,
        level: float = 0.9,
        seed: int | None = None,
        n_random_starts: int = 1,
        allow_truncation: bool = False,
        evaluate_on_original: bool = False,
    ):
        """Percentile bootstrap interval for the average causal effect."""
        self._require_fitted()
        dataset = self._check_dataset(X)
        return bootstrap_ci(
            self.spec_,
            dataset,
            self.coefficients_,
            treated,
            control,
            n_boot=n_boot,
            level=level,
            seed=seed if seed is not None else self.random_state,
            fit_options=self._options(),
            n_random_starts=n_random_starts,
            allow_truncation=allow_truncation,
            evaluate_on_original=evaluate_on_original,
            n_jobs=self.n_jobs,
        )
