"""Model structure, coefficients, datasets, and probability evaluation.

A model over M response categories and S hidden states has three softmax
components driven by linear predictors: an initial-state row, per-state
transition rows, and per-state emission rows. Designs may include lagged
response indicators, which makes transitions and/or emissions depend on the
previous response (the feedback edges); those columns are completed at
evaluation time from the running response.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import DesignInfo
from .errors import ValidationError
from .simplex import SumToZeroBasis, softmax

__all__ = [
    "MISSING",
    "ModelSpec",
    "CoefficientSet",
    "PanelDataset",
    "initial_probs",
    "transition_matrix",
    "emission_matrix",
    "pack_params",
    "unpack_params",
    "permute_states",
    "model_to_dict",
    "model_from_dict",
]

#: Response code marking a missing observation. Valid categories are 1..M.
MISSING = 0

MODEL_FORMAT = "fanhmm-model"
MODEL_FORMAT_VERSION = 1
SIGN_CONVENTION = "first-nonzero-positive"


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and design structure of a model.

    Attributes
    ----------
    n_states : int
        Number of hidden states S >= 1.
    n_categories : int
        Number of response categories M >= 2.
    pi_design, a_design, b_design : DesignInfo
        Designs for the initial-state, transition, and emission predictors.
        Lag columns in ``a_design`` create the previous-response-to-state
        edge; lag columns in ``b_design`` create the previous-response-to-
        response edge. The initial design cannot reference the lag.
    """

    n_states: int
    n_categories: int
    pi_design: DesignInfo
    a_design: DesignInfo
    b_design: DesignInfo

    def __post_init__(self) -> None:
        if self.n_states < 1:
            raise ValidationError(f"n_states must be >= 1, got {self.n_states}")
        if self.n_categories < 2:
            raise ValidationError(
                f"n_categories must be >= 2, got {self.n_categories}"
            )
        if self.pi_design.has_lag:
            raise ValidationError(
                "the initial-state design cannot depend on the lagged response"
            )
        for label, info in (("a_design", self.a_design), ("b_design", self.b_design)):
            top = info.max_lag_category()
            if top > self.n_categories:
                raise ValidationError(
                    f"{label} references lag category {top} but the model has "
                    f"{self.n_categories} categories"
                )

    @property
    def lag_in_transition(self) -> bool:
        """True when transitions depend on the previous response."""
        return self.a_design.has_lag

    @property
    def lag_in_emission(self) -> bool:
        """True when emissions depend on the previous response.

        With this edge active the first response of every sequence is
        conditioned on rather than modeled, and must be observed.
        """
        return self.b_design.has_lag

    @property
    def k_pi(self) -> int:
        return self.pi_design.n_columns

    @property
    def k_a(self) -> int:
        return self.a_design.n_columns

    @property
    def k_b(self) -> int:
        return self.b_design.n_columns

    @property
    def n_params(self) -> int:
        """Length of the packed coefficient vector."""
        s, m = self.n_states, self.n_categories
        return (s - 1) * self.k_pi + s * (s - 1) * self.k_a + s * (m - 1) * self.k_b

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_categories": self.n_categories,
            "pi_design": self.pi_design.to_dict(),
            "a_design": self.a_design.to_dict(),
            "b_design": self.b_design.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelSpec":
        return cls(
            n_states=int(payload["n_states"]),
            n_categories=int(payload["n_categories"]),
            pi_design=DesignInfo.from_dict(payload["pi_design"]),
            a_design=DesignInfo.from_dict(payload["a_design"]),
            b_design=DesignInfo.from_dict(payload["b_design"]),
        )


@dataclass
class CoefficientSet:
    """Unconstrained coefficients for every model component.

    Attributes
    ----------
    eta_pi : np.ndarray, shape (S - 1, K_pi)
    eta_a : np.ndarray, shape (S, S - 1, K_A)
        Block ``eta_a[s]`` parameterizes the transition row of state s + 1.
    eta_b : np.ndarray, shape (S, M - 1, K_B)
        Block ``eta_b[s]`` parameterizes the emission row of state s + 1.
    basis_s, basis_m : SumToZeroBasis
        Orthonormal sum-to-zero bases for the state and category dimensions.
    """

    eta_pi: np.ndarray
    eta_a: np.ndarray
    eta_b: np.ndarray
    basis_s: SumToZeroBasis = field(repr=False)
    basis_m: SumToZeroBasis = field(repr=False)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "CoefficientSet":
        s, m = spec.n_states, spec.n_categories
        return cls(
            eta_pi=np.zeros((s - 1, spec.k_pi)),
            eta_a=np.zeros((s, s - 1, spec.k_a)),
            eta_b=np.zeros((s, m - 1, spec.k_b)),
            basis_s=SumToZeroBasis.for_dim(s),
            basis_m=SumToZeroBasis.for_dim(m),
        )

    def copy(self) -> "CoefficientSet":
        return CoefficientSet(
            eta_pi=self.eta_pi.copy(),
            eta_a=self.eta_a.copy(),
            eta_b=self.eta_b.copy(),
            basis_s=self.basis_s,
            basis_m=self.basis_m,
        )

    @property
    def n_states(self) -> int:
        return self.basis_s.dim

    @property
    def n_categories(self) -> int:
        return self.basis_m.dim

    def gamma_pi(self) -> np.ndarray:
        """Sum-to-zero initial-state coefficients, shape (S, K_pi)."""
        return self.basis_s.q @ self.eta_pi

    def gamma_a(self) -> np.ndarray:
        """Sum-to-zero transition coefficients, shape (S, S, K_A).

        ``gamma_a()[s, r]`` weights the predictor of moving from state s + 1
        to state r + 1.
        """
        return np.einsum("ij,sjk->sik", self.basis_s.q, self.eta_a)

    def gamma_b(self) -> np.ndarray:
        """Sum-to-zero emission coefficients, shape (S, M, K_B)."""
        return np.einsum("ij,sjk->sik", self.basis_m.q, self.eta_b)

    def norm_sq(self) -> float:
        """Squared Frobenius norm over all blocks (the ridge penalty core)."""
        return (
            float(np.sum(self.eta_pi**2))
            + float(np.sum(self.eta_a**2))
            + float(np.sum(self.eta_b**2))
        )

    def validate_against(self, spec: ModelSpec) -> None:
        s, m = spec.n_states, spec.n_categories
        expected = {
            "eta_pi": (s - 1, spec.k_pi),
            "eta_a": (s, s - 1, spec.k_a),
            "eta_b": (s, m - 1, spec.k_b),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ValidationError(
                    f"{name} has shape {actual}, expected {shape} for this model"
                )
        for name in expected:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} contains non-finite values")


def pack_params(coeffs: CoefficientSet) -> np.ndarray:
    """Flatten coefficients into a single vector.

    Order: initial block, transition blocks by state, emission blocks by
    state, row-major within each block.
    """
    parts = [coeffs.eta_pi.ravel()]
    parts += [coeffs.eta_a[s].ravel() for s in range(coeffs.eta_a.shape[0])]
    parts += [coeffs.eta_b[s].ravel() for s in range(coeffs.eta_b.shape[0])]
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack_params(spec: ModelSpec, packed: np.ndarray) -> CoefficientSet:
    """Inverse of :func:`pack_params` for a given model structure."""
    packed = np.asarray(packed, dtype=float)
    if packed.ndim != 1 or packed.size != spec.n_params:
        raise ValidationError(
            f"packed vector must have length {spec.n_params}, got {packed.shape}"
        )
    s, m = spec.n_states, spec.n_categories
    out = CoefficientSet.zeros(spec)
    pos = 0

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal pos
        size = int(np.prod(shape))
        block = packed[pos : pos + size].reshape(shape)
        pos += size
        return block

    out.eta_pi = take((s - 1, spec.k_pi))
    for i in range(s):
        out.eta_a[i] = take((s - 1, spec.k_a))
    for i in range(s):
        out.eta_b[i] = take((m - 1, spec.k_b))
    return out


def initial_probs(spec: ModelSpec, coeffs: CoefficientSet, x_pi: np.ndarray) -> np.ndarray:
    """Initial state distribution for one sequence.

    Parameters
    ----------
    x_pi : np.ndarray, shape (K_pi,)

    Returns
    -------
    np.ndarray, shape (S,)
    """
    x_pi = _check_row(x_pi, spec.k_pi, "x_pi")
    return softmax(coeffs.gamma_pi() @ x_pi)


def transition_matrix(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    x_a: np.ndarray,
    y_prev: int | None = None,
) -> np.ndarray:
    """Transition matrix at one time point.

    Parameters
    ----------
    x_a : np.ndarray, shape (K_A,)
        Stored design row; lag columns are completed here.
    y_prev : int, optional
        Previous response, required when transitions depend on the lag.

    Returns
    -------
    np.ndarray, shape (S, S)
        Row s is the distribution of the next state given current state s + 1.
    """
    x_a = _check_row(x_a, spec.k_a, "x_a")
    row = _completed_row(spec.a_design, x_a, y_prev, spec.n_categories)
    return softmax(coeffs.gamma_a() @ row, axis=-1)


def emission_matrix(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    x_b: np.ndarray,
    y_prev: int | None = None,
) -> np.ndarray:
    """Emission matrix at one time point.

    Returns
    -------
    np.ndarray, shape (S, M)
        Row s is the response distribution in state s + 1.
    """
    x_b = _check_row(x_b, spec.k_b, "x_b")
    row = _completed_row(spec.b_design, x_b, y_prev, spec.n_categories)
    return softmax(coeffs.gamma_b() @ row, axis=-1)


def _check_row(x: np.ndarray, k: int, label: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (k,):
        raise ValidationError(f"{label} must have shape ({k},), got {x.shape}")
    return x


def _completed_row(
    info: DesignInfo, row: np.ndarray, y_prev: int | None, n_categories: int
) -> np.ndarray:
    if not info.has_lag:
        return row
    if y_prev is None or y_prev == MISSING:
        raise ValidationError(
            "this component depends on the previous response; pass y_prev"
        )
    if not 1 <= y_prev <= n_categories:
        raise ValidationError(
            f"y_prev must be in 1..{n_categories}, got {y_prev}"
        )
    return info.complete(row, y_prev)


def permute_states(coeffs: CoefficientSet, perm: Sequence[int]) -> CoefficientSet:
    """Relabel hidden states; new state i takes the role of old state perm[i].

    The returned coefficients describe the identical distribution over
    responses; likelihoods are invariant under this map.

    Parameters
    ----------
    perm : sequence of int, shape (S,)
        A permutation of 0..S-1 in the new-to-old direction.
    """
    perm = np.asarray(perm, dtype=int)
    s = coeffs.n_states
    if sorted(perm.tolist()) != list(range(s)):
        raise ValidationError(f"perm must be a permutation of 0..{s - 1}, got {perm}")
    q_s, q_m = coeffs.basis_s.q, coeffs.basis_m.q
    g_pi = coeffs.gamma_pi()[perm, :]
    g_a = coeffs.gamma_a()[perm][:, perm, :]
    g_b = coeffs.gamma_b()[perm]
    return CoefficientSet(
        eta_pi=q_s.T @ g_pi,
        eta_a=np.einsum("ij,sik->sjk", q_s, g_a),
        eta_b=np.einsum("ij,sik->sjk", q_m, g_b),
        basis_s=coeffs.basis_s,
        basis_m=coeffs.basis_m,
    )


def model_to_dict(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    category_labels: Sequence[str] | None = None,
) -> dict:
    """JSON-serializable snapshot of a model (structure plus parameters)."""
    coeffs.validate_against(spec)
    payload = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "sign_convention": SIGN_CONVENTION,
        "spec": spec.to_dict(),
        "parameters": pack_params(coeffs).tolist(),
    }
    if category_labels is not None:
        payload["category_labels"] = list(category_labels)
    return payload


def model_from_dict(payload: dict) -> tuple[ModelSpec, CoefficientSet]:
    """Rebuild a model from :func:`model_to_dict` output."""
    if payload.get("format") != MODEL_FORMAT:
        raise ValidationError(
            f"not a model payload: format={payload.get('format')!r}"
        )
    version = payload.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValidationError(f"unsupported model format version {version!r}")
    if payload.get("sign_convention") != SIGN_CONVENTION:
        raise ValidationError(
            f"unknown basis sign convention {payload.get('sign_convention')!r}"
        )
    spec = ModelSpec.from_dict(payload["spec"])
    coeffs = unpack_params(spec, np.asarray(payload["parameters"], dtype=float))
    return spec, coeffs


@dataclass
class PanelDataset:
    """A panel of categorical response sequences with per-component designs.

    Sequences are stored padded to the longest length; entries beyond a
    sequence's length are ignored. Responses use codes 1..M with 0 for
    missing. Design matrices hold final values for every column except
    lag-dependent ones, which stay zero placeholders until evaluation.

    Attributes
    ----------
    y : np.ndarray, shape (N, T_max), int
    lengths : np.ndarray, shape (N,), int
    x_pi : np.ndarray, shape (N, K_pi)
    x_a : np.ndarray, shape (N, T_max, K_A)
        Row ``[i, t]`` drives the transition into time t + 1; row 0 is unused.
    x_b : np.ndarray, shape (N, T_max, K_B)
    pi_design, a_design, b_design : DesignInfo
    n_categories : int
    category_labels : tuple of str, optional
        Original category labels in code order.
    ids : tuple, optional
        Original sequence identifiers.
    times : np.ndarray, optional, shape (N, T_max)
        Original time stamps, for faithful export.
    covariates : dict of str to np.ndarray, optional
        Raw covariate values, shape (N, T_max) each, for export and reporting.
    states : np.ndarray, optional, shape (N, T_max), int
        True latent states when the panel was simulated.
    """

    y: np.ndarray
    lengths: np.ndarray
    x_pi: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray
    pi_design: DesignInfo
    a_design: DesignInfo
    b_design: DesignInfo
    n_categories: int
    category_labels: tuple[str, ...] | None = None
    ids: tuple | None = None
    times: np.ndarray | None = None
    covariates: dict[str, np.ndarray] | None = None
    states: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=int)
        self.lengths = np.asarray(self.lengths, dtype=int)
        self.x_pi = np.asarray(self.x_pi, dtype=float)
        self.x_a = np.asarray(self.x_a, dtype=float)
        self.x_b = np.asarray(self.x_b, dtype=float)
        n, t_max = self.y.shape
        if self.lengths.shape != (n,):
            raise ValidationError("lengths must have one entry per sequence")
        if np.any(self.lengths < 1) or np.any(self.lengths > t_max):
            raise ValidationError("sequence lengths must lie in 1..T_max")
        if self.x_pi.shape != (n, self.pi_design.n_columns):
            raise ValidationError(
                f"x_pi must have shape ({n}, {self.pi_design.n_columns}), "
                f"got {self.x_pi.shape}"
            )
        for label, arr, info in (
            ("x_a", self.x_a, self.a_design),
            ("x_b", self.x_b, self.b_design),
        ):
            if arr.shape != (n, t_max, info.n_columns):
                raise ValidationError(
                    f"{label} must have shape ({n}, {t_max}, {info.n_columns}), "
                    f"got {arr.shape}"
                )
        in_range = np.zeros_like(self.y, dtype=bool)
        for i in range(n):
            in_range[i, : self.lengths[i]] = True
        bad = in_range & ((self.y < 0) | (self.y > self.n_categories))
        if np.any(bad):
            raise ValidationError(
                f"responses must be 0 (missing) or 1..{self.n_categories}"
            )

    @property
    def n_sequences(self) -> int:
        return self.y.shape[0]

    @property
    def t_max(self) -> int:
        return self.y.shape[1]

    def observed_mask(self) -> np.ndarray:
        """Boolean (N, T_max): in-range and observed responses."""
        mask = self.y != MISSING
        for i in range(self.n_sequences):
            mask[i, self.lengths[i] :] = False
        return mask

    def is_complete(self) -> bool:
        """True when every in-range response is observed."""
        mask = np.ones_like(self.y, dtype=bool)
        for i in range(self.n_sequences):
            mask[i, self.lengths[i] :] = False
        return bool(np.all(self.y[mask] != MISSING))

    def subset(self, indices: Sequence[int]) -> "PanelDataset":
        """New dataset from the given sequence indices (repeats allowed)."""
        indices = np.asarray(indices, dtype=int)
        return PanelDataset(
            y=self.y[indices].copy(),
            lengths=self.lengths[indices].copy(),
            x_pi=self.x_pi[indices].copy(),
            x_a=self.x_a[indices].copy(),
            x_b=self.x_b[indices].copy(),
            pi_design=self.pi_design,
            a_design=self.a_design,
            b_design=self.b_design,
            n_categories=self.n_categories,
            category_labels=self.category_labels,
            ids=tuple(self.ids[i] for i in indices) if self.ids is not None else None,
            times=self.times[indices].copy() if self.times is not None else None,
            covariates=(
                {k: v[indices].copy() for k, v in self.covariates.items()}
                if self.covariates is not None
                else None
            ),
            states=self.states[indices].copy() if self.states is not None else None,
        )

    def validate_against(self, spec: ModelSpec) -> None:
        if spec.n_categories != self.n_categories:
            raise ValidationError(
                f"dataset has {self.n_categories} categories, model expects "
                f"{spec.n_categories}"
            )
        for label, mine, theirs in (
            ("pi_design", self.pi_design, spec.pi_design),
            ("a_design", self.a_design, spec.a_design),
            ("b_design", self.b_design, spec.b_design),
        ):
            if mine != theirs:
                raise ValidationError(f"dataset {label} does not match the model")
        if spec.lag_in_emission:
            first = self.y[:, 0]
            if np.any(first == MISSING):
                bad = int(np.nonzero(first == MISSING)[0][0])
                raise ValidationError(
                    "the first response of every sequence must be observed when "
                    f"emissions depend on the previous response (sequence {bad})"
                )

    def completed_designs(self) -> tuple[np.ndarray, np.ndarray]:
        """Design matrices with lag columns filled from the observed panel.

        Valid wherever the needed previous response is observed; positions
        whose lag is missing are filled against the reference category and
        must be recomputed by the caller. Time 1 rows use the reference
        category (the transition row is unused there; the emission row is
        only used by models without the response-lag edge, which have no lag
        columns to fill).
        """
        y_prev = np.ones_like(self.y)
        y_prev[:, 1:] = np.where(self.y[:, :-1] == MISSING, 1, self.y[:, :-1])
        xa = self.a_design.complete(self.x_a, y_prev)
        xb = self.b_design.complete(self.x_b, y_prev)
        return xa, xb
