"""Long-format CSV ingestion, export, and schema-driven design building.

A dataset arrives as one CSV row per (sequence id, time point) with a
categorical response column and numeric covariate columns. A
:class:`DataSchema` names those columns, assigns covariates to the model
components they feed, and lists interaction and lagged-response terms. The
loader sorts rows by (id, time), maps response labels to codes 1..M,
assembles the per-component design matrices in a fixed column order, and
keeps the raw covariate values so designs can be rebuilt under a different
schema or intervention later. Covariates must be complete; only the
response may be missing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from .design import DesignInfo, make_design_info
from .errors import ValidationError
from .model import MISSING, ModelSpec, PanelDataset

__all__ = [
    "DataSchema",
    "build_design",
    "design_from_schema",
    "example_data_path",
    "example_schema",
    "load_dataset",
    "model_spec_from_schema",
    "write_dataset",
]

SCHEMA_FORMAT = "fanhmm-schema"
SCHEMA_FORMAT_VERSION = 1

_COMPONENTS = ("pi", "a", "b")


def _as_terms(terms) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(term) for term in terms)


@dataclass(frozen=True)
class DataSchema:
    """Column mapping and model-term declaration for long-format panels.

    Attributes
    ----------
    id_column, time_column, response_column : str
        CSV columns holding the sequence id, the within-sequence order,
        and the categorical response.
    categories : tuple of str, optional
        Response labels in code order 1..M. When omitted, observed labels
        are sorted lexicographically.
    pi_covariates, a_covariates, b_covariates : tuple of str
        Covariate columns feeding each model component; a column may feed
        several. Initial-state covariates are read at the first period.
    lag_in_transition, lag_in_emission : bool
        Add previous-response indicator columns to the transition or
        emission design.
    pi_interactions, a_interactions, b_interactions : tuple of terms
        Each term is 2 or 3 tokens, a covariate of that component or
        ``"lag"`` (not in the initial design).
    missing_token : str
        Response value treated as missing. Covariates may never be
        missing.
    """

    id_column: str = "id"
    time_column: str = "time"
    response_column: str = "response"
    categories: tuple[str, ...] | None = None
    pi_covariates: tuple[str, ...] = ()
    a_covariates: tuple[str, ...] = ()
    b_covariates: tuple[str, ...] = ()
    lag_in_transition: bool = False
    lag_in_emission: bool = False
    pi_interactions: tuple[tuple[str, ...], ...] = ()
    a_interactions: tuple[tuple[str, ...], ...] = ()
    b_interactions: tuple[tuple[str, ...], ...] = ()
    missing_token: str = "NA"

    def __post_init__(self) -> None:
        for name in ("pi_covariates", "a_covariates", "b_covariates"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("pi_interactions", "a_interactions", "b_interactions"):
            object.__setattr__(self, name, _as_terms(getattr(self, name)))
        if self.categories is not None:
            object.__setattr__(self, "categories", tuple(self.categories))
            if len(set(self.categories)) != len(self.categories):
                raise ValidationError(
                    f"categories contains duplicates: {list(self.categories)}"
                )
        roles = (self.id_column, self.time_column, self.response_column)
        if any(not name for name in roles):
            raise ValidationError(
                "id_column, time_column, and response_column must be nonempty"
            )
        if len(set(roles)) != 3:
            raise ValidationError(
                f"id_column, time_column, and response_column must be distinct, "
                f"got {roles}"
            )
        if not self.missing_token:
            raise ValidationError("missing_token must be nonempty")
        clash = set(self.covariate_names) & set(roles)
        if clash:
            raise ValidationError(
                f"covariates {sorted(clash)} collide with id/time/response columns"
            )

    @property
    def covariate_names(self) -> tuple[str, ...]:
        """All covariate columns, in first-mention order, without repeats."""
        seen = dict.fromkeys(
            self.pi_covariates + self.a_covariates + self.b_covariates
        )
        return tuple(seen)

    def to_dict(self) -> dict:
        return {
            "format": SCHEMA_FORMAT,
            "format_version": SCHEMA_FORMAT_VERSION,
            "id_column": self.id_column,
            "time_column": self.time_column,
            "response_column": self.response_column,
            "categories": list(self.categories) if self.categories else None,
            "pi_covariates": list(self.pi_covariates),
            "a_covariates": list(self.a_covariates),
            "b_covariates": list(self.b_covariates),
            "lag_in_transition": self.lag_in_transition,
            "lag_in_emission": self.lag_in_emission,
            "pi_interactions": [list(t) for t in self.pi_interactions],
            "a_interactions": [list(t) for t in self.a_interactions],
            "b_interactions": [list(t) for t in self.b_interactions],
            "missing_token": self.missing_token,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DataSchema":
        if "format" in payload and payload["format"] != SCHEMA_FORMAT:
            raise ValidationError(
                f"not a schema payload: format={payload['format']!r}"
            )
        known = {
            "id_column",
            "time_column",
            "response_column",
            "categories",
            "pi_covariates",
            "a_covariates",
            "b_covariates",
            "lag_in_transition",
            "lag_in_emission",
            "pi_interactions",
            "a_interactions",
            "b_interactions",
            "missing_token",
        }
        extra = set(payload) - known - {"format", "format_version"}
        if extra:
            raise ValidationError(f"unknown schema fields: {sorted(extra)}")
        kwargs = {k: payload[k] for k in known if k in payload and payload[k] is not None}
        return cls(**kwargs)


def design_from_schema(
    schema: DataSchema, component: str, n_categories: int
) -> DesignInfo:
    """Design of one model component in the package's fixed column order.

    Order: intercept, covariates as declared, previous-response indicator
    columns for categories 2..M, then interactions.
    """
    if component == "pi":
        return make_design_info(
            covariates=schema.pi_covariates,
            n_categories=n_categories,
            include_lag=False,
            interactions=schema.pi_interactions,
        )
    if component == "a":
        return make_design_info(
            covariates=schema.a_covariates,
            n_categories=n_categories,
            include_lag=schema.lag_in_transition,
            interactions=schema.a_interactions,
        )
    if component == "b":
        return make_design_info(
            covariates=schema.b_covariates,
            n_categories=n_categories,
            include_lag=schema.lag_in_emission,
            interactions=schema.b_interactions,
        )
    raise ValidationError(f"component must be one of {_COMPONENTS}, got {component!r}")


def model_spec_from_schema(
    schema: DataSchema, n_states: int, n_categories: int
) -> ModelSpec:
    """Model structure implied by a schema at a given state count."""
    return ModelSpec(
        n_states=n_states,
        n_categories=n_categories,
        pi_design=design_from_schema(schema, "pi", n_categories),
        a_design=design_from_schema(schema, "a", n_categories),
        b_design=design_from_schema(schema, "b", n_categories),
    )


def _parse_times(schema: DataSchema, frame: pd.DataFrame) -> np.ndarray:
    raw = frame[schema.time_column].to_numpy()
    times = np.empty(len(raw))
    for k, text in enumerate(raw):
        try:
            times[k] = float(text)
        except ValueError:
            raise ValidationError(
                f"time column {schema.time_column!r} has non-numeric value "
                f"{text!r}"
            ) from None
    if np.any(np.isnan(times)):
        raise ValidationError(
            f"time column {schema.time_column!r} contains NaN; every row "
            f"needs an orderable time"
        )
    return times


def _parse_covariate(
    schema: DataSchema, name: str, value: str, seq_id: str, stamp: float
) -> float:
    if value == "" or value == schema.missing_token:
        raise ValidationError(
            f"missing covariate value for {name!r} at (id {seq_id!r}, "
            f"time {stamp:g}); covariates must be complete"
        )
    try:
        return float(value)
    except ValueError:
        raise ValidationError(
            f"covariate column {name!r} has non-numeric value {value!r} at "
            f"(id {seq_id!r}, time {stamp:g})"
        ) from None


def load_dataset(path, schema: DataSchema) -> PanelDataset:
    """Read a long-format CSV into a panel with schema-built designs.

    Rows are sorted by (id, time) with a stable sort, so the result does
    not depend on input row order. Response labels map to codes 1..M,
    either per ``schema.categories`` or in lexicographic order of the
    observed labels. Raw covariates are retained on the dataset, and
    design matrices follow :func:`design_from_schema`.

    Raises
    ------
    ValidationError
        For absent columns, duplicate (id, time) keys, unorderable times,
        unknown response categories, or missing/non-numeric covariates.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    needed = [schema.id_column, schema.time_column, schema.response_column]
    needed += list(schema.covariate_names)
    absent = [c for c in needed if c not in frame.columns]
    if absent:
        raise ValidationError(
            f"dataset at {path} lacks columns {absent}; found "
            f"{list(frame.columns)}"
        )
    if len(frame) == 0:
        raise ValidationError(f"dataset at {path} has no rows")

    times = _parse_times(schema, frame)
    frame = frame.assign(_time=times)
    frame = frame.sort_values(
        [schema.id_column, "_time"], kind="mergesort", ignore_index=True
    )
    duplicated = frame.duplicated([schema.id_column, "_time"])
    if duplicated.any():
        row = frame[duplicated].iloc[0]
        raise ValidationError(
            f"duplicate (id, time) = ({row[schema.id_column]!r}, "
            f"{row['_time']:g})"
        )

    observed = frame[schema.response_column].to_numpy()
    if schema.categories is not None:
        labels = list(schema.categories)
    else:
        labels = sorted(set(observed) - {schema.missing_token})
    code_of = {label: code for code, label in enumerate(labels, start=1)}
    if len(labels) < 2:
        raise ValidationError(
            f"need at least 2 response categories, found {labels}"
        )

    ids = list(dict.fromkeys(frame[schema.id_column]))
    group_rows = {seq_id: [] for seq_id in ids}
    for k in range(len(frame)):
        group_rows[frame.at[k, schema.id_column]].append(k)
    lengths = np.array([len(group_rows[seq_id]) for seq_id in ids], dtype=int)
    n, t_max = len(ids), int(lengths.max())

    y = np.zeros((n, t_max), dtype=int)
    stamps = np.full((n, t_max), np.nan)
    covariates = {name: np.zeros((n, t_max)) for name in schema.covariate_names}
    for i, seq_id in enumerate(ids):
        for t, k in enumerate(group_rows[seq_id]):
            stamp = frame.at[k, "_time"]
            stamps[i, t] = stamp
            text = frame.at[k, schema.response_column]
            if text == schema.missing_token:
                y[i, t] = MISSING
            elif text in code_of:
                y[i, t] = code_of[text]
            else:
                raise ValidationError(
                    f"unknown response category {text!r} at (id {seq_id!r}, "
                    f"time {stamp:g}); known: {labels}"
                )
            for name in schema.covariate_names:
                covariates[name][i, t] = _parse_covariate(
                    schema, name, frame.at[k, name], seq_id, stamp
                )

    m_n = len(labels)
    pi_design = design_from_schema(schema, "pi", m_n)
    a_design = design_from_schema(schema, "a", m_n)
    b_design = design_from_schema(schema, "b", m_n)
    first_period = {name: arr[:, 0] for name, arr in covariates.items()}
    return PanelDataset(
        y=y,
        lengths=lengths,
        x_pi=pi_design.assemble(first_period, (n,)),
        x_a=a_design.assemble(covariates, (n, t_max)),
        x_b=b_design.assemble(covariates, (n, t_max)),
        pi_design=pi_design,
        a_design=a_design,
        b_design=b_design,
        n_categories=m_n,
        category_labels=tuple(labels),
        ids=tuple(ids),
        times=stamps,
        covariates=covariates,
    )


def build_design(
    dataset: PanelDataset, schema: DataSchema, spec: ModelSpec
) -> PanelDataset:
    """Rebuild the design matrices of a loaded panel for a model.

    The schema must imply exactly the designs the model expects at the
    dataset's category count, and the dataset must carry raw values for
    every covariate those designs use. Returns a new panel that validates
    against ``spec``; responses, labels, ids, times, and raw covariates
    are shared.
    """
    m_n = dataset.n_categories
    for component, expected in (
        ("pi", spec.pi_design),
        ("a", spec.a_design),
        ("b", spec.b_design),
    ):
        implied = design_from_schema(schema, component, m_n)
        if implied != expected:
            raise ValidationError(
                f"the schema implies {component}_design columns "
                f"{list(implied.names)}, but the model expects "
                f"{list(expected.names)}"
            )
    raw = dataset.covariates or {}
    absent = [c for c in schema.covariate_names if c not in raw]
    if absent:
        raise ValidationError(
            f"dataset carries no raw values for covariates {absent}; "
            f"reload it with a schema declaring them"
        )
    n, t_max = dataset.y.shape
    first_period = {name: raw[name][:, 0] for name in schema.covariate_names}
    rebuilt = PanelDataset(
        y=dataset.y,
        lengths=dataset.lengths,
        x_pi=spec.pi_design.assemble(first_period, (n,)),
        x_a=spec.a_design.assemble(raw, (n, t_max)),
        x_b=spec.b_design.assemble(raw, (n, t_max)),
        pi_design=spec.pi_design,
        a_design=spec.a_design,
        b_design=spec.b_design,
        n_categories=m_n,
        category_labels=dataset.category_labels,
        ids=dataset.ids,
        times=dataset.times,
        covariates=dataset.covariates,
        states=dataset.states,
    )
    rebuilt.validate_against(spec)
    return rebuilt


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_dataset(
    dataset: PanelDataset,
    path,
    schema: DataSchema | None = None,
    include_states: bool = False,
) -> None:
    """Export a panel as long-format CSV, one row per (id, time).

    Column names come from ``schema`` (defaults otherwise); ids fall back
    to 1..N and times to 1..T when the dataset does not carry originals.
    Floats are written at 17 significant digits, so loading the file with
    the same schema reproduces the panel exactly.
    """
    schema = schema or DataSchema()
    names = dataset.covariates.keys() if dataset.covariates else ()
    labels = dataset.category_labels
    if labels is None:
        labels = tuple(str(m) for m in range(1, dataset.n_categories + 1))
    header = [schema.id_column, schema.time_column, schema.response_column]
    header += list(names)
    if include_states and dataset.states is not None:
        header.append("state")
    lines = [",".join(header)]
    for i in range(dataset.n_sequences):
        seq_id = dataset.ids[i] if dataset.ids is not None else str(i + 1)
        for t in range(int(dataset.lengths[i])):
            if dataset.times is not None:
                stamp = _fmt(dataset.times[i, t])
            else:
                stamp = str(t + 1)
            code = dataset.y[i, t]
            response = schema.missing_token if code == MISSING else labels[code - 1]
            row = [str(seq_id), stamp, response]
            row += [_fmt(dataset.covariates[name][i, t]) for name in names]
            if include_states and dataset.states is not None:
                row.append(str(int(dataset.states[i, t])))
            lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def example_data_path() -> Path:
    """Path of the packaged synthetic workplace-leave panel."""
    return Path(resources.files("fanhmm") / "examples" / "workplace_panel.csv")


def example_schema() -> DataSchema:
    """Schema matching the packaged synthetic panel.

    Workplaces are sequences; the time variable ranks consecutive births.
    The response is the leave choice at each birth with three levels, the
    ``reform`` indicator switches on at a policy change, and ``skill``
    marks higher-skilled fathers. The reform effect on leave choices is
    allowed to differ by skill, and transitions react to the previous
    choice and the reform.
    """
    return DataSchema(
        id_column="workplace",
        time_column="birth_order",
        response_column="leave",
        categories=("none", "short", "extended"),
        pi_covariates=("reform",),
        a_covariates=("reform",),
        b_covariates=("reform", "skill"),
        lag_in_transition=True,
        lag_in_emission=True,
        b_interactions=(("reform", "skill"),),
    )
