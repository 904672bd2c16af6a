"""Design-matrix column definitions and lag-aware completion.

Each model component (initial, transition, emission) has a design whose
columns are intercepts, covariates, lagged-response indicators, or products
of those. Lagged-response columns cannot be precomputed when building a
dataset — they depend on the running response — so every design carries a
column-derivation map and rows are *completed* against a concrete previous
response at evaluation time. The same map lets interventions overwrite a
covariate and rebuild every derived column instead of touching stored
products, and it forbids targeting lag columns directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

__all__ = ["ColumnDef", "DesignInfo", "make_design_info", "INTERCEPT_NAME", "LAG_TOKEN"]

INTERCEPT_NAME = "(intercept)"
#: Token used in interaction term definitions to refer to the lagged response.
LAG_TOKEN = "lag"


@dataclass(frozen=True)
class ColumnDef:
    """One design column and how to derive its value.

    Attributes
    ----------
    name : str
        Unique column label.
    kind : str
        One of "intercept", "covariate", "lag", "interaction".
    lag_category : int | None
        For kind "lag": the response category (2..M) this dummy indicates.
    factors : tuple
        For kind "interaction": factors ("cov", column_index) referring to a
        covariate column of the same design, or ("lag", category). The column
        value is the product of factor values.
    """

    name: str
    kind: str
    lag_category: int | None = None
    factors: tuple[tuple[str, int], ...] = ()

    @property
    def depends_on_lag(self) -> bool:
        if self.kind == "lag":
            return True
        return any(tag == "lag" for tag, _ in self.factors)


@dataclass(frozen=True)
class DesignInfo:
    """Ordered collection of design columns for one model component."""

    columns: tuple[ColumnDef, ...]

    def __post_init__(self) -> None:
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate design column names: {names}")
        for col in self.columns:
            if col.kind not in ("intercept", "covariate", "lag", "interaction"):
                raise ValidationError(f"unknown column kind {col.kind!r}")
            if col.kind == "lag" and (col.lag_category is None or col.lag_category < 2):
                raise ValidationError(
                    f"lag column {col.name!r} must indicate a category >= 2"
                )
            for tag, ref in col.factors:
                if tag == "cov":
                    if not 0 <= ref < len(self.columns):
                        raise ValidationError(
                            f"interaction {col.name!r} references column {ref} "
                            f"outside the design"
                        )
                    if self.columns[ref].kind != "covariate":
                        raise ValidationError(
                            f"interaction {col.name!r} must reference covariate "
                            f"columns, got {self.columns[ref].kind!r}"
                        )
                elif tag == "lag":
                    if ref < 2:
                        raise ValidationError(
                            f"interaction {col.name!r} lag factor must use a "
                            f"category >= 2"
                        )
                else:
                    raise ValidationError(f"unknown factor tag {tag!r}")

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def has_lag(self) -> bool:
        return any(c.depends_on_lag for c in self.columns)

    @property
    def lag_dependent(self) -> np.ndarray:
        """Boolean mask, shape (n_columns,), of lag-dependent columns."""
        return np.array([c.depends_on_lag for c in self.columns], dtype=bool)

    def max_lag_category(self) -> int:
        cats = [c.lag_category for c in self.columns if c.kind == "lag"]
        cats += [ref for c in self.columns for tag, ref in c.factors if tag == "lag"]
        return max(cats, default=0)

    def column_index(self, name: str) -> int:
        for j, col in enumerate(self.columns):
            if col.name == name:
                return j
        raise ValidationError(f"no design column named {name!r}")

    def covariate_index(self, name: str) -> int:
        j = self.column_index(name)
        if self.columns[j].kind != "covariate":
            raise ValidationError(
                f"column {name!r} has kind {self.columns[j].kind!r}; only "
                f"covariate columns can be assigned values"
            )
        return j

    def complete(self, rows: np.ndarray, y_prev: np.ndarray | int) -> np.ndarray:
        """Fill lag-dependent columns for a concrete previous response.

        Parameters
        ----------
        rows : np.ndarray, shape (..., n_columns)
            Stored design rows; non-lag columns hold final values.
        y_prev : int or np.ndarray broadcastable to rows[..., 0]
            Previous response category in 1..M. Category 1 (and any category
            without a dummy) zeroes all lag indicators.

        Returns
        -------
        np.ndarray, shape (..., n_columns)
        """
        rows = np.asarray(rows, dtype=float)
        if not self.has_lag:
            return rows
        out = rows.copy()
        y_prev = np.asarray(y_prev)
        for j, col in enumerate(self.columns):
            if not col.depends_on_lag:
                continue
            if col.kind == "lag":
                out[..., j] = (y_prev == col.lag_category).astype(float)
            else:
                value = np.ones(np.broadcast_shapes(y_prev.shape, rows[..., 0].shape))
                for tag, ref in col.factors:
                    if tag == "cov":
                        value = value * rows[..., ref]
                    else:
                        value = value * (y_prev == ref).astype(float)
                out[..., j] = value
        return out

    def complete_all_lags(self, rows: np.ndarray, n_categories: int) -> np.ndarray:
        """Complete rows under every possible previous response.

        Returns an array of shape (..., n_categories, n_columns) whose slice
        ``[..., m - 1, :]`` is ``complete(rows, m)``. Used when the previous
        response is unobserved and the recursion mixes over categories.
        """
        rows = np.asarray(rows, dtype=float)
        variants = np.empty(rows.shape[:-1] + (n_categories, self.n_columns))
        for m in range(1, n_categories + 1):
            variants[..., m - 1, :] = self.complete(rows, m)
        return variants

    def assign_covariates(
        self, rows: np.ndarray, values: Mapping[str, float | np.ndarray]
    ) -> np.ndarray:
        """Set covariate columns to new values and rebuild derived columns.

        Interaction columns among covariates are recomputed from the updated
        base columns; lag-dependent columns stay placeholders (they are filled
        at evaluation time). Assigning to intercept, lag, or interaction
        columns is rejected.

        Parameters
        ----------
        rows : np.ndarray, shape (..., n_columns)
        values : mapping of covariate column name to scalar or array
            Arrays must broadcast against ``rows[..., 0]``.
        """
        out = np.asarray(rows, dtype=float).copy()
        for name, value in values.items():
            out[..., self.covariate_index(name)] = value
        for j, col in enumerate(self.columns):
            if col.kind == "interaction" and not col.depends_on_lag:
                value = np.ones_like(out[..., 0])
                for _, ref in col.factors:
                    value = value * out[..., ref]
                out[..., j] = value
        return out

    def assemble(self, raw: Mapping[str, np.ndarray], shape: tuple[int, ...]) -> np.ndarray:
        """Build stored design values from raw covariate arrays.

        Parameters
        ----------
        raw : mapping of covariate name to array of shape ``shape``
        shape : leading shape of the output, e.g. (n_sequences, n_periods)

        Returns
        -------
        np.ndarray, shape ``shape + (n_columns,)``
            Lag-dependent columns are zero placeholders.
        """
        out = np.zeros(shape + (self.n_columns,))
        for j, col in enumerate(self.columns):
            if col.kind == "intercept":
                out[..., j] = 1.0
            elif col.kind == "covariate":
                if col.name not in raw:
                    raise ValidationError(f"missing covariate values for {col.name!r}")
                out[..., j] = raw[col.name]
            elif col.kind == "interaction" and not col.depends_on_lag:
                value = np.ones(shape)
                for _, ref in col.factors:
                    value = value * out[..., ref]
                out[..., j] = value
        return out

    def to_dict(self) -> list[dict]:
        return [
            {
                "name": c.name,
                "kind": c.kind,
                "lag_category": c.lag_category,
                "factors": [list(f) for f in c.factors],
            }
            for c in self.columns
        ]

    @classmethod
    def from_dict(cls, payload: Iterable[dict]) -> "DesignInfo":
        cols = []
        for item in payload:
            cols.append(
                ColumnDef(
                    name=item["name"],
                    kind=item["kind"],
                    lag_category=item.get("lag_category"),
                    factors=tuple(tuple(f) for f in item.get("factors", ())),
                )
            )
        return cls(columns=tuple(cols))


def make_design_info(
    covariates: Sequence[str] = (),
    n_categories: int = 0,
    include_lag: bool = False,
    interactions: Sequence[Sequence[str]] = (),
    intercept: bool = True,
) -> DesignInfo:
    """Construct a design in the package's fixed column order.

    Order: intercept, covariates (given order), lag dummies for categories
    2..M, then interactions (given order; a term containing the ``"lag"``
    token expands into one column per category 2..M).

    Parameters
    ----------
    covariates : sequence of str
        Covariate column names.
    n_categories : int
        Number of response categories M; required when ``include_lag`` or an
        interaction uses the lag token.
    include_lag : bool
        Add indicator columns for the previous response (reference category 1).
    interactions : sequence of terms
        Each term is a sequence of 2 or 3 tokens, each a covariate name or
        ``"lag"``.
    intercept : bool
        Include a leading constant column.
    """
    cols: list[ColumnDef] = []
    if intercept:
        cols.append(ColumnDef(name=INTERCEPT_NAME, kind="intercept"))
    cov_index: dict[str, int] = {}
    for name in covariates:
        cov_index[name] = len(cols)
        cols.append(ColumnDef(name=name, kind="covariate"))
    if include_lag:
        if n_categories < 2:
            raise ValidationError("lag columns require n_categories >= 2")
        for m in range(2, n_categories + 1):
            cols.append(ColumnDef(name=f"lag[{m}]", kind="lag", lag_category=m))

    def factor_for(token: str, category: int | None) -> tuple[str, int]:
        if token == LAG_TOKEN:
            assert category is not None
            return ("lag", category)
        if token not in cov_index:
            raise ValidationError(
                f"interaction token {token!r} is not a declared covariate"
            )
        return ("cov", cov_index[token])

    for term in interactions:
        term = list(term)
        if not 2 <= len(term) <= 3:
            raise ValidationError(
                f"interactions must have 2 or 3 factors, got {len(term)}"
            )
        n_lag_tokens = sum(1 for tok in term if tok == LAG_TOKEN)
        if n_lag_tokens > 1:
            raise ValidationError("an interaction may contain the lag token once")
        if n_lag_tokens:
            if n_categories < 2:
                raise ValidationError("lag interactions require n_categories >= 2")
            for m in range(2, n_categories + 1):
                name = ":".join(f"lag[{m}]" if tok == LAG_TOKEN else tok for tok in term)
                cols.append(
                    ColumnDef(
                        name=name,
                        kind="interaction",
                        factors=tuple(factor_for(tok, m) for tok in term),
                    )
                )
        else:
            name = ":".join(term)
            cols.append(
                ColumnDef(
                    name=name,
                    kind="interaction",
                    factors=tuple(factor_for(tok, None) for tok in term),
                )
            )
    return DesignInfo(columns=tuple(cols))
