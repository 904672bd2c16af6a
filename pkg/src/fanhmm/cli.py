"""Command-line interface for simulation, fitting, effects, and experiments.

Every subcommand reads a JSON config file (``--config``). The config may
hold settings for several subcommands at once; each subcommand reads only
the sections it needs and validates them before any computation starts,
naming the offending field in error messages. ``--seed``, ``--threads``,
and ``--out-dir`` override the corresponding config fields.

Exit codes: 0 on success, 1 for validation problems (bad config, bad
data, bad usage), 2 when a computation fails.

Input paths inside the config resolve relative to the config file's
directory; the output directory resolves relative to the working
directory. Output files never contain wall-clock timings, so a rerun
with the same config and seed writes identical bytes; timing notes go
to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .causal import InterventionPlan, ace, bootstrap_ci
from .data import (
    DataSchema,
    build_design,
    load_dataset,
    model_spec_from_schema,
    write_dataset,
)
from .errors import FanHmmError, ValidationError
from .estimation import FitOptions, fit
from .model import model_from_dict, model_to_dict
from .simulate import (
    DgpConfig,
    benchmark_model,
    covariate_process,
    intercept_benchmark_model,
    run_multistart_experiment,
    run_rmse_coverage_experiment,
    simulate_dataset,
)

__all__ = ["cli", "main"]

CONFIG_FORMAT = "fanhmm-config"
CONFIG_FORMAT_VERSION = 1

_BENCHMARKS = ("feedback", "intercept-3", "intercept-4")


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as validation errors."""

    def error(self, message):
        raise ValidationError(message)


def _require(section: dict, name: str, path: str):
    if name not in section:
        raise ValidationError(f"config field {path!r} is required")
    return section[name]


def _typed(value, kind: str, path: str):
    ok = {
        "str": lambda v: isinstance(v, str),
        "bool": lambda v: isinstance(v, bool),
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "list": lambda v: isinstance(v, list),
        "dict": lambda v: isinstance(v, dict),
    }[kind]
    if not ok(value):
        raise ValidationError(
            f"config field {path!r} must have type {kind}, got {value!r}"
        )
    return value


def _get(section: dict, name: str, path: str, kind: str, default=None, required=False):
    if name not in section:
        if required:
            raise ValidationError(f"config field {path!r} is required")
        return default
    return _typed(section[name], kind, path)


@dataclasses.dataclass
class Context:
    """A parsed config plus the effective run-wide settings."""

    payload: dict
    base: Path
    out_dir: Path
    seed: int
    threads: int

    def section(self, name: str, required: bool = True) -> dict:
        if name not in self.payload:
            if required:
                raise ValidationError(f"config section {name!r} is required")
            return {}
        return _typed(self.payload[name], "dict", name)

    def resolve(self, relative) -> Path:
        return self.base / Path(relative)

    def out_path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name


def load_run_config(path, seed=None, threads=None, out_dir=None) -> Context:
    """Read and shape-check a config file, applying command-line overrides."""
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    declared = payload.get("format", CONFIG_FORMAT)
    if declared != CONFIG_FORMAT:
        raise ValidationError(f"config field 'format' must be {CONFIG_FORMAT!r}, got {declared!r}")
    version = payload.get("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ValidationError(f"config field 'format_version' must be {CONFIG_FORMAT_VERSION}, got {version!r}")
    if seed is None:
        seed = _get(payload, "seed", "seed", "int", default=0)
    if threads is None:
        threads = _get(payload, "threads", "threads", "int", default=1)
    if threads < 1:
        raise ValidationError(f"config field 'threads' must be >= 1, got {threads}")
    if out_dir is None:
        out_dir = _get(payload, "out_dir", "out_dir", "str", default=".")
    return Context(
        payload=payload,
        base=config_path.resolve().parent,
        out_dir=Path(out_dir),
        seed=int(seed),
        threads=int(threads),
    )


def _schema_from_section(ctx: Context, section: dict, path: str) -> DataSchema:
    inline = "schema" in section
    external = "schema_path" in section
    if inline == external:
        raise ValidationError(
            f"config section {path!r} needs exactly one of 'schema' or 'schema_path'"
        )
    if inline:
        payload = _typed(section["schema"], "dict", f"{path}.schema")
    else:
        schema_file = ctx.resolve(_typed(section["schema_path"], "str", f"{path}.schema_path"))
        try:
            payload = json.loads(schema_file.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationError(f"cannot read {path}.schema_path: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}.schema_path is not valid JSON: {exc}") from None
    return DataSchema.from_dict(payload)


def _load_data(ctx: Context):
    section = ctx.section("data")
    data_path = ctx.resolve(_require(section, "path", "data.path"))
    schema = _schema_from_section(ctx, section, "data")
    return load_dataset(data_path, schema), schema


def _fit_options(ctx: Context) -> FitOptions:
    section = ctx.section("fit", required=False)
    base = FitOptions()
    return FitOptions(
        method=_get(section, "method", "fit.method", "str", base.method),
        penalty=float(_get(section, "penalty", "fit.penalty", "number", base.penalty)),
        n_starts=_get(section, "n_starts", "fit.n_starts", "int", base.n_starts),
        init_sd=float(_get(section, "init_sd", "fit.init_sd", "number", base.init_sd)),
        max_em_iter=_get(section, "max_em_iter", "fit.max_em_iter", "int", base.max_em_iter),
        em_tol=float(_get(section, "em_tol", "fit.em_tol", "number", base.em_tol)),
        max_iter=_get(section, "max_iter", "fit.max_iter", "int", base.max_iter),
        ftol=float(_get(section, "ftol", "fit.ftol", "number", base.ftol)),
        n_jobs=ctx.threads,
    )


def _model_section(ctx: Context, path: str):
    section = ctx.section("model")
    if "path" in section:
        model_path = ctx.resolve(_typed(section["path"], "str", f"{path}.path"))
        try:
            payload = json.loads(Path(model_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationError(f"cannot read {path}.path: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}.path is not valid JSON: {exc}") from None
        spec, coeffs = model_from_dict(payload)
        labels = payload.get("category_labels")
        return spec, coeffs, tuple(labels) if labels else None
    name = _get(section, "benchmark", f"{path}.benchmark", "str")
    if name is None:
        raise ValidationError(
            f"config section {path!r} needs either 'path' or 'benchmark'"
        )
    if name == "feedback":
        spec, coeffs = benchmark_model(
            x_scale=float(_get(section, "x_scale", f"{path}.x_scale", "number", 1.0)),
            lag_scale=float(_get(section, "lag_scale", f"{path}.lag_scale", "number", 1.0)),
        )
        return spec, coeffs, None
    if name == "intercept-3":
        spec, coeffs = intercept_benchmark_model(3)
        return spec, coeffs, None
    if name == "intercept-4":
        spec, coeffs = intercept_benchmark_model(4)
        return spec, coeffs, None
    raise ValidationError(
        f"config field {path + '.benchmark'!r} must be one of {_BENCHMARKS}, got {name!r}"
    )


def _covariate_generators(section: dict, path: str) -> dict:
    result = {}
    for name, value in section.items():
        field = f"{path}.{name}"
        if isinstance(value, dict):
            params = dict(value)
            process = params.pop("process", None)
            if process is None:
                raise ValidationError(f"config field {field + '.process'!r} is required")
            result[name] = covariate_process(process, **params)
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            result[name] = float(value)
        elif isinstance(value, list):
            result[name] = np.asarray(value, dtype=float)
        else:
            raise ValidationError(
                f"config field {field!r} must be a number, a list, or a "
                f"process mapping"
            )
    return result


def _plan(section: dict, path: str) -> InterventionPlan:
    covariates = _typed(_require(section, "covariates", f"{path}.covariates"), "dict", f"{path}.covariates")
    for name, value in covariates.items():
        _typed(value, "number", f"{path}.covariates.{name}")
    return InterventionPlan(
        covariates={k: float(v) for k, v in covariates.items()},
        time=_get(section, "time", f"{path}.time", "int", required=True),
        horizon=_get(section, "horizon", f"{path}.horizon", "int", 0),
        mode=_get(section, "mode", f"{path}.mode", "str", "recurring"),
        covariate_autocorrelation=_get(
            section,
            "covariate_autocorrelation",
            f"{path}.covariate_autocorrelation",
            "bool",
            False,
        ),
    )


def _dgp(ctx: Context) -> tuple[DgpConfig, tuple[str, ...] | None]:
    section = ctx.section("simulate")
    spec, coeffs, labels = _model_section(ctx, "model")
    covariates = _covariate_generators(
        _get(section, "covariates", "simulate.covariates", "dict", {}),
        "simulate.covariates",
    )
    config = DgpConfig(
        spec=spec,
        coeffs=coeffs,
        n_sequences=_get(section, "n_sequences", "simulate.n_sequences", "int", required=True),
        n_periods=_get(section, "n_periods", "simulate.n_periods", "int", required=True),
        covariates=covariates,
        seed=ctx.seed,
    )
    return config, labels


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _fmt(value: float) -> str:
    value = float(value)
    return "NA" if np.isnan(value) else format(value, ".17g")


def _write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (str, int)) else _fmt(c) for c in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _labels_for(dataset, n_categories: int):
    if dataset is not None and dataset.category_labels is not None:
        return dataset.category_labels
    return tuple(str(m) for m in range(1, n_categories + 1))


def cmd_simulate(ctx: Context) -> int:
    section = ctx.section("simulate")
    config, labels = _dgp(ctx)
    dataset = simulate_dataset(config)
    if labels is not None:
        dataset = dataclasses.replace(dataset, category_labels=labels)
    out_name = _get(section, "out", "simulate.out", "str", "simulated.csv")
    include_states = _get(section, "include_states", "simulate.include_states", "bool", False)
    out = ctx.out_path(out_name)
    write_dataset(dataset, out, include_states=include_states)
    print(
        f"simulated {dataset.n_sequences} sequences x {dataset.y.shape[1]} "
        f"periods ({dataset.n_categories} categories) -> {out}"
    )
    return 0


def cmd_fit(ctx: Context) -> int:
    dataset, schema = _load_data(ctx)
    section = ctx.section("model")
    n_states = _get(section, "n_states", "model.n_states", "int", required=True)
    spec = model_spec_from_schema(schema, n_states, dataset.n_categories)
    dataset = build_design(dataset, schema, spec)
    options = _fit_options(ctx)
    started = time.perf_counter()
    result = fit(spec, dataset, options, seed=ctx.seed)
    elapsed = time.perf_counter() - started
    model_path = ctx.out_path("model.json")
    _write_json(
        model_path,
        model_to_dict(spec, result.coeffs, category_labels=dataset.category_labels),
    )
    report_path = ctx.out_path("fit.json")
    _write_json(
        report_path,
        {
            "format": "fanhmm-fit-report",
            "format_version": 1,
            "n_states": spec.n_states,
            "n_categories": spec.n_categories,
            "n_parameters": spec.n_params,
            "n_sequences": dataset.n_sequences,
            "method": result.method,
            "penalty": result.penalty,
            "loglik": result.loglik,
            "objective": result.objective,
            "n_starts": len(result.starts),
            "n_success": result.n_success,
            "best_start": result.best_start,
        },
    )
    print(
        f"fit: {spec.n_states} states, loglik {format(result.loglik, '.10g')}, "
        f"objective {format(result.objective, '.10g')}, "
        f"{result.n_success}/{len(result.starts)} starts at the optimum"
    )
    print(f"wrote {model_path} and {report_path}")
    print(f"fit took {elapsed:.2f}s", file=sys.stderr)
    return 0


def _effect_inputs(ctx: Context):
    dataset, schema = _load_data(ctx)
    spec, coeffs, labels = _model_section(ctx, "model")
    if spec.n_categories != dataset.n_categories:
        raise ValidationError(
            f"the model expects {spec.n_categories} response categories, "
            f"the dataset has {dataset.n_categories}"
        )
    if labels is not None and dataset.category_labels is not None:
        if tuple(labels) != tuple(dataset.category_labels):
            raise ValidationError(
                f"model category labels {list(labels)} do not match the "
                f"dataset's {list(dataset.category_labels)}"
            )
    dataset = build_design(dataset, schema, spec)
    return dataset, spec, coeffs


def cmd_ace(ctx: Context) -> int:
    section = ctx.section("ace")
    treated = _plan(_typed(_require(section, "treated", "ace.treated"), "dict", "ace.treated"), "ace.treated")
    control = _plan(_typed(_require(section, "control", "ace.control"), "dict", "ace.control"), "ace.control")
    allow_truncation = _get(section, "allow_truncation", "ace.allow_truncation", "bool", False)
    dataset, spec, coeffs = _effect_inputs(ctx)
    result = ace(spec, coeffs, dataset, treated, control, allow_truncation)
    labels = _labels_for(dataset, spec.n_categories)
    csv_path = ctx.out_path("ace.csv")
    _write_csv(
        csv_path,
        ("category", "label", "control", "treated", "effect"),
        [
            (m + 1, labels[m], result.control.y_marginal[m], result.treated.y_marginal[m], result.effect[m])
            for m in range(spec.n_categories)
        ],
    )
    json_path = ctx.out_path("ace.json")
    _write_json(
        json_path,
        {
            "format": "fanhmm-estimate",
            "format_version": 1,
            "kind": "ace",
            "outcome_time": result.treated.outcome_time,
            "labels": list(labels),
            "effect": result.effect.tolist(),
            "treated_marginal": result.treated.y_marginal.tolist(),
            "control_marginal": result.control.y_marginal.tolist(),
            "n_used": result.treated.n_used,
            "n_excluded": result.treated.n_excluded,
        },
    )
    print(f"average causal effect at time {result.treated.outcome_time} (n={result.treated.n_used}):")
    for m in range(spec.n_categories):
        print(f"  {labels[m]}: {format(result.effect[m], '+.6f')}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_bootstrap(ctx: Context) -> int:
    section = ctx.section("bootstrap")
    ace_section = ctx.section("ace")
    treated = _plan(_typed(_require(ace_section, "treated", "ace.treated"), "dict", "ace.treated"), "ace.treated")
    control = _plan(_typed(_require(ace_section, "control", "ace.control"), "dict", "ace.control"), "ace.control")
    allow_truncation = _get(ace_section, "allow_truncation", "ace.allow_truncation", "bool", False)
    dataset, spec, coeffs = _effect_inputs(ctx)
    started = time.perf_counter()
    result = bootstrap_ci(
        spec,
        dataset,
        coeffs,
        treated,
        control,
        n_boot=_get(section, "n_boot", "bootstrap.n_boot", "int", 50),
        level=float(_get(section, "level", "bootstrap.level", "number", 0.9)),
        seed=ctx.seed,
        fit_options=_fit_options(ctx),
        n_random_starts=_get(section, "n_random_starts", "bootstrap.n_random_starts", "int", 1),
        allow_truncation=allow_truncation,
        evaluate_on_original=_get(
            section, "evaluate_on_original", "bootstrap.evaluate_on_original", "bool", False
        ),
        n_jobs=ctx.threads,
    )
    elapsed = time.perf_counter() - started
    labels = _labels_for(dataset, spec.n_categories)
    csv_path = ctx.out_path("bootstrap.csv")
    _write_csv(
        csv_path,
        ("category", "label", "point", "lower", "upper"),
        [
            (m + 1, labels[m], result.point[m], result.lower[m], result.upper[m])
            for m in range(spec.n_categories)
        ],
    )
    json_path = ctx.out_path("bootstrap.json")
    _write_json(
        json_path,
        {
            "format": "fanhmm-estimate",
            "format_version": 1,
            "kind": "bootstrap",
            "level": result.level,
            "labels": list(labels),
            "point": result.point.tolist(),
            "lower": result.lower.tolist(),
            "upper": result.upper.tolist(),
            "n_draws": int(result.draws.shape[0]),
            "n_dropped": result.n_dropped,
            "unreliable": result.unreliable,
            "messages": list(result.messages),
        },
    )
    print(f"bootstrap effect intervals at level {result.level:g} "
          f"({result.draws.shape[0]} draws, {result.n_dropped} dropped):")
    for m in range(spec.n_categories):
        print(
            f"  {labels[m]}: {format(result.point[m], '+.6f')} "
            f"[{format(result.lower[m], '+.6f')}, {format(result.upper[m], '+.6f')}]"
        )
    if result.unreliable:
        print("warning: more than a fifth of the replicates failed; "
              "interpret the interval with caution")
    print(f"wrote {csv_path} and {json_path}")
    print(f"bootstrap took {elapsed:.2f}s", file=sys.stderr)
    return 0


def cmd_experiment_multistart(ctx: Context) -> int:
    section = ctx.section("experiment")
    dgp, _ = _dgp(ctx)
    states = _get(section, "states", "experiment.states", "list", required=True)
    penalties = _get(section, "penalties", "experiment.penalties", "list", required=True)
    methods = tuple(
        _get(section, "methods", "experiment.methods", "list", ["direct", "hybrid"])
    )
    started = time.perf_counter()
    report = run_multistart_experiment(
        dgp,
        states,
        penalties,
        n_replications=_get(
            section, "n_replications", "experiment.n_replications", "int", required=True
        ),
        methods=methods,
        fit_options=_fit_options(ctx),
        n_jobs=ctx.threads,
    )
    elapsed = time.perf_counter() - started
    out = ctx.out_path("multistart.csv")
    stable = report.drop_timing()
    stable.to_csv(out)
    print(f"multistart experiment: {len(report.rows)} cells -> {out}")
    for row in stable.rows:
        print(
            f"  S={row['n_states']} penalty={row['penalty']:g} "
            f"{row['method']}: success rate {row['success_rate']:.3f}"
        )
    print(f"experiment took {elapsed:.2f}s", file=sys.stderr)
    return 0


def cmd_experiment_coverage(ctx: Context) -> int:
    section = ctx.section("experiment")
    dgp, _ = _dgp(ctx)
    started = time.perf_counter()
    report = run_rmse_coverage_experiment(
        dgp,
        _get(section, "states", "experiment.states", "list", required=True),
        _get(section, "horizons", "experiment.horizons", "list", required=True),
        n_replications=_get(
            section, "n_replications", "experiment.n_replications", "int", required=True
        ),
        n_boot=_get(section, "n_boot", "experiment.n_boot", "int", 50),
        covariate=_get(section, "covariate", "experiment.covariate", "str", "x"),
        treated_value=float(
            _get(section, "treated_value", "experiment.treated_value", "number", 1.0)
        ),
        control_value=float(
            _get(section, "control_value", "experiment.control_value", "number", 0.0)
        ),
        intervention_time=_get(
            section, "intervention_time", "experiment.intervention_time", "int", None
        ),
        level=float(_get(section, "level", "experiment.level", "number", 0.9)),
        truth_sequences=_get(
            section, "truth_sequences", "experiment.truth_sequences", "int", 20_000
        ),
        fit_options=_fit_options(ctx) if "fit" in ctx.payload else None,
        n_random_starts=_get(
            section, "n_random_starts", "experiment.n_random_starts", "int", 0
        ),
        n_jobs=ctx.threads,
    )
    elapsed = time.perf_counter() - started
    out = ctx.out_path("coverage.csv")
    report.drop_timing().to_csv(out)
    print(f"coverage experiment: {len(report.rows)} cells -> {out}")
    print(f"experiment took {elapsed:.2f}s", file=sys.stderr)
    return 0


def cmd_validate(ctx: Context) -> int:
    dataset, schema = _load_data(ctx)
    model_section = ctx.section("model", required=False)
    if "n_states" in model_section:
        n_states = _typed(model_section["n_states"], "int", "model.n_states")
        spec = model_spec_from_schema(schema, n_states, dataset.n_categories)
        build_design(dataset, schema, spec)
    observed = int(np.sum(dataset.observed_mask()))
    total = int(dataset.lengths.sum())
    print(
        f"ok: {dataset.n_sequences} sequences, {total} rows, "
        f"{dataset.n_categories} categories "
        f"{list(_labels_for(dataset, dataset.n_categories))}, "
        f"{total - observed} missing responses"
    )
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "ace": cmd_ace,
    "bootstrap": cmd_bootstrap,
    "experiment-multistart": cmd_experiment_multistart,
    "experiment-coverage": cmd_experiment_coverage,
    "validate": cmd_validate,
}


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="fanhmm",
        description=(
            "Feedback-augmented non-homogeneous hidden Markov models: "
            "simulate panels, fit, estimate intervention effects, and run "
            "benchmark experiments."
        ),
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, handler in _COMMANDS.items():
        cmd = sub.add_parser(name, help=handler.__doc__)
        cmd.add_argument("--config", required=True, help="path to a JSON config file")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--threads", type=int, default=None, help="override the config worker count")
        cmd.add_argument("--out-dir", default=None, help="override the config output directory")
    return parser


def main(argv=None) -> int:
    """Entry point; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ValidationError("a subcommand is required (try --help)")
        ctx = load_run_config(
            args.config, seed=args.seed, threads=args.threads, out_dir=args.out_dir
        )
        return _COMMANDS[args.command](ctx)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FanHmmError as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"computation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


cli = main

if __name__ == "__main__":
    sys.exit(main())
