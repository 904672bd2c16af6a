"""Regenerate the packaged synthetic workplace-leave panel.

Writes src/fanhmm/examples/{workplace_panel.csv, workplace_panel.schema.json,
workplace_model.json}. Deterministic; rerunning reproduces the same bytes.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from fanhmm.data import example_schema, load_dataset, model_spec_from_schema, write_dataset
from fanhmm.model import CoefficientSet, model_to_dict
from fanhmm.simplex import gamma_from_target_probs, gamma_to_eta
from fanhmm.simulate import DgpConfig, covariate_process, rng_stream, simulate_dataset

SEED = 20260819
N_WORKPLACES = 60
MAX_BIRTHS = 8


def example_model():
    schema = example_schema()
    spec = model_spec_from_schema(schema, n_states=3, n_categories=3)
    coeffs = CoefficientSet.zeros(spec)

    # Initial state: [(intercept), reform]
    gam_pi = np.zeros((3, spec.k_pi))
    gam_pi[:, 0] = gamma_from_target_probs([0.55, 0.30, 0.15])
    gam_pi[:, 1] = [-0.4, 0.1, 0.3]
    coeffs.eta_pi = gamma_to_eta(gam_pi, coeffs.basis_s)

    # Transitions: [(intercept), reform, lag[short], lag[extended]]
    a_tables = [
        [0.85, 0.10, 0.05],
        [0.10, 0.80, 0.10],
        [0.05, 0.15, 0.80],
    ]
    a_reform = [-0.2, 0.0, 0.2]
    a_lag_short = [-0.15, 0.30, -0.15]
    a_lag_ext = [-0.2, -0.1, 0.3]
    for s in range(3):
        gam = np.zeros((3, spec.k_a))
        gam[:, 0] = gamma_from_target_probs(a_tables[s])
        gam[:, 1] = a_reform
        gam[:, 2] = a_lag_short
        gam[:, 3] = a_lag_ext
        coeffs.eta_a[s] = gamma_to_eta(gam, coeffs.basis_s)

    # Emissions: [(intercept), reform, skill, lag[short], lag[extended],
    #             reform:skill]
    b_tables = [
        [0.75, 0.18, 0.07],
        [0.25, 0.55, 0.20],
        [0.10, 0.25, 0.65],
    ]
    b_reform = [-0.6, 0.2, 0.4]
    b_skill = [-0.3, 0.1, 0.2]
    b_lag_short = [-0.25, 0.50, -0.25]
    b_lag_ext = [-0.3, -0.2, 0.5]
    b_reform_skill = [-0.3, 0.0, 0.3]
    for s in range(3):
        gam = np.zeros((3, spec.k_b))
        gam[:, 0] = gamma_from_target_probs(b_tables[s])
        gam[:, 1] = b_reform
        gam[:, 2] = b_skill
        gam[:, 3] = b_lag_short
        gam[:, 4] = b_lag_ext
        gam[:, 5] = b_reform_skill
        coeffs.eta_b[s] = gamma_to_eta(gam, coeffs.basis_m)
    return spec, coeffs


def main():
    out_dir = Path(__file__).resolve().parents[1] / "src" / "fanhmm" / "examples"
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = example_schema()
    spec, coeffs = example_model()

    config = DgpConfig(
        spec=spec,
        coeffs=coeffs,
        n_sequences=N_WORKPLACES,
        n_periods=MAX_BIRTHS,
        covariates={
            "reform": covariate_process("step", switch_time=5),
            "skill": covariate_process("bernoulli", p=0.45, per_sequence=False),
        },
        seed=SEED,
    )
    panel = simulate_dataset(config)

    lengths = rng_stream(SEED, "lengths").integers(4, MAX_BIRTHS + 1, N_WORKPLACES)
    panel = dataclasses.replace(
        panel,
        lengths=lengths,
        ids=tuple(f"w{i + 1:02d}" for i in range(N_WORKPLACES)),
        category_labels=schema.categories,
        states=None,
    )

    csv_path = out_dir / "workplace_panel.csv"
    write_dataset(panel, csv_path, schema=schema)
    (out_dir / "workplace_panel.schema.json").write_text(
        json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    (out_dir / "workplace_model.json").write_text(
        json.dumps(
            model_to_dict(spec, coeffs, category_labels=schema.categories), indent=2
        )
        + "\n",
        encoding="utf-8",
    )

    reload = load_dataset(csv_path, schema)
    for i, n_rows in enumerate(lengths):
        assert np.array_equal(reload.y[i, :n_rows], panel.y[i, :n_rows])
        for name in schema.covariate_names:
            assert np.array_equal(
                reload.covariates[name][i, :n_rows],
                panel.covariates[name][i, :n_rows],
            )
    print(f"wrote {csv_path} ({int(lengths.sum())} rows, {N_WORKPLACES} workplaces)")


if __name__ == "__main__":
    main()
