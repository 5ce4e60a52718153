"""Experiment harness: toy data, configs, CSV ingestion, runs, reports."""

import dataclasses
import json

import numpy as np
import pytest

from privcollab import (
    ExperimentConfig,
    RngStream,
    ToyGenerator,
    condition_means,
    emit_report,
    generate_toy,
    ingest_csv,
    load_config,
    load_sidecar,
    loglog_slope,
    parse_condition,
    perturb_queries,
    rows_from_csv,
    run_experiment,
    toy_truth,
    toy_truth_rows,
)


class TestToyTruth:
    def test_frozen_values(self):
        assert toy_truth(np.zeros(5)) == 0.0
        assert toy_truth([1.0, 0.0, 0.0, 0.0, 0.0]) == pytest.approx(0.2)
        assert toy_truth([0.5, 0.0, 0.0, 0.0, 0.0]) == pytest.approx(0.159375)
        # norm sqrt(2) > 1 falls into the quadratic branch
        assert toy_truth([1.0, 1.0, 0.0, 0.0, 0.0]) == pytest.approx(0.4)

    def test_rows_match_scalar(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(0.0, 1.0, size=(40, 5))
        rows = toy_truth_rows(X)
        assert np.allclose(rows, [toy_truth(x) for x in X], atol=1e-15)

    def test_continuous_at_unit_sphere(self):
        inner = toy_truth([1.0 - 1e-12, 0.0])
        outer = toy_truth([1.0 + 1e-12, 0.0])
        assert abs(inner - outer) < 1e-9


class TestGenerateToy:
    def test_shapes_and_noiseless_test(self):
        gen = ToyGenerator(dim=3, train_size=120, test_size=30)
        data = generate_toy(gen)
        assert data.train_inputs.shape == (120, 3)
        assert data.test_inputs.shape == (30, 3)
        assert data.table_qia.shape == (30, 1)
        assert np.array_equal(data.test_outputs, toy_truth_rows(data.test_inputs))
        assert data.schema.qia_dims == 1 and data.schema.ca_dims == 2

    def test_training_noise_scale(self):
        gen = ToyGenerator(dim=2, train_size=4000, test_size=10, noise_sigma=0.3)
        data = generate_toy(gen)
        resid = data.train_outputs - toy_truth_rows(data.train_inputs)
        assert abs(resid.std() - 0.3) < 0.02
        silent = generate_toy(dataclasses.replace(gen, noise_sigma=0.0))
        assert np.array_equal(silent.train_outputs, toy_truth_rows(silent.train_inputs))

    def test_seed_reproducibility(self):
        gen = ToyGenerator(dim=2, train_size=50, test_size=20, seed=9)
        a, b = generate_toy(gen), generate_toy(gen)
        assert np.array_equal(a.train_inputs, b.train_inputs)
        assert np.array_equal(a.table_qia, b.table_qia)

    def test_table_jitter_scale(self):
        gen = ToyGenerator(dim=2, train_size=10, test_size=3000)
        data = generate_toy(gen)
        jitter = data.table_qia - data.test_inputs[:, :1]
        assert abs(jitter.std() - 1e-3) < 1e-4

    def test_validation(self):
        with pytest.raises(ValueError):
            ToyGenerator(dim=0)
        with pytest.raises(ValueError):
            ToyGenerator(dim=3, qia_dims=4)
        with pytest.raises(ValueError):
            ToyGenerator(noise_sigma=-1.0)


class TestConditionsAndConfig:
    def test_parse_condition(self):
        assert parse_condition("raw") == ("raw", "none")
        assert parse_condition("tqma+bstd") == ("tqma", "bstd")
        assert parse_condition("uma") == ("uma", "none")
        assert parse_condition("mul+dp") == ("mul", "dp")
        for bad in ("raw+none", "foo", "tqma+foo", "raw+bstd+dp"):
            with pytest.raises(ValueError):
                parse_condition(bad)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(conditions=("raw", "nonsense"))
        with pytest.raises(ValueError):
            ExperimentConfig(split_fractions=(0.8, 0.3, 0.2))
        with pytest.raises(ValueError):
            ExperimentConfig(sweep_param="no_such_field", sweep_values=(1,))
        with pytest.raises(ValueError):
            ExperimentConfig(repetitions=0)

    def test_param_builders(self):
        cfg = ExperimentConfig(tqma_depth=3, p_lower=2, p_upper=5)
        assert cfg.tqma_params().depth == 3
        bstd = cfg.bstd_params()
        assert (bstd.p_lower, bstd.p_upper) == (2, 5)

    def test_fingerprint_tracks_settings(self):
        a = ExperimentConfig(seed=0)
        b = ExperimentConfig(seed=0)
        c = ExperimentConfig(seed=1)
        assert a.fingerprint == b.fingerprint
        assert a.fingerprint != c.fingerprint

    def test_load_config_round_trip(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train_size": 500, "conditions": ["raw", "tqma"],
                                    "seed": 3}))
        cfg = load_config(path)
        assert cfg.train_size == 500
        assert cfg.conditions == ("raw", "tqma")
        assert cfg.seed == 3
        path.write_text(json.dumps({"train_sz": 500}))
        with pytest.raises(ValueError):
            load_config(path)


class TestPerturbQueries:
    def _setup(self):
        gen = ToyGenerator(dim=3, train_size=10, test_size=64, seed=2)
        data = generate_toy(gen)
        cfg = ExperimentConfig(dim=3, tqma_depth=2, uma_groups=4, kdtree_leaf=4)
        return data.test_inputs, data.schema, cfg

    def test_raw_passthrough(self):
        X, schema, cfg = self._setup()
        out = perturb_queries("raw", X, schema, cfg, RngStream(0, "q"))
        assert out is X

    def test_tqma_snaps_qia_columns_only(self):
        X, schema, cfg = self._setup()
        out = perturb_queries("tqma", X, schema, cfg, RngStream(0, "q"))
        grid = (2 * np.arange(4) + 1) / 8.0
        assert np.all(np.isin(out[:, 0], grid))
        assert np.array_equal(out[:, 1:], X[:, 1:])

    def test_noise_methods_move_values(self):
        X, schema, cfg = self._setup()
        for method in ("mul", "dp"):
            out = perturb_queries(method, X, schema, cfg, RngStream(1, "q"))
            assert out.shape == X.shape
            assert not np.array_equal(out, X)

    def test_aggregation_methods_reduce_distinct_values(self):
        X, schema, cfg = self._setup()
        for method in ("uma", "kdtree"):
            out = perturb_queries(method, X, schema, cfg, RngStream(2, "q"))
            assert len(np.unique(out[:, 0])) < len(np.unique(X[:, 0]))


SMALL = dict(source="toy", dim=2, train_size=260, test_size=40, m=4,
             tqma_depth=3, p_lower=1, p_upper=2, repetitions=2,
             conditions=("raw", "tqma+bstd"), seed=5)


class TestRunExperiment:
    def test_row_grid_and_determinism(self):
        report = run_experiment(ExperimentConfig(**SMALL))
        assert len(report.rows) == 4  # 2 reps x 2 conditions
        again = run_experiment(ExperimentConfig(**SMALL))
        assert report.rows == again.rows

    def test_threads_do_not_change_results(self):
        serial = run_experiment(ExperimentConfig(**SMALL))
        threaded = run_experiment(ExperimentConfig(**{**SMALL, "threads": 2}))
        for a, b in zip(serial.rows, threaded.rows):
            assert a == b

    def test_attack_fills_attack_column(self):
        report = run_experiment(ExperimentConfig(**{**SMALL, "attack": True}))
        assert all(row["attack_ae"] is not None for row in report.rows)

    def test_sweep_crosses_values(self):
        cfg = ExperimentConfig(**{**SMALL, "repetitions": 1,
                                  "sweep_param": "train_size",
                                  "sweep_values": (120, 260)})
        report = run_experiment(cfg)
        seen = {(row["sweep_value"], row["condition"]) for row in report.rows}
        assert seen == {(120, "raw"), (120, "tqma+bstd"),
                        (260, "raw"), (260, "tqma+bstd")}

    def test_condition_means_pivots(self):
        report = run_experiment(ExperimentConfig(**SMALL))
        means = condition_means(report.rows, "ae")
        assert set(means) == {"raw", "tqma+bstd"}
        raw_aes = [r["ae"] for r in report.rows if r["condition"] == "raw"]
        assert means["raw"] == pytest.approx(np.mean(raw_aes))


class TestLoglogSlope:
    def test_power_law_recovery(self):
        xs = np.array([2000.0, 8000.0, 32000.0])
        ys = 3.0 * xs ** -0.7
        assert loglog_slope(xs, ys) == pytest.approx(-0.7, abs=1e-12)


def _write_clinical_csv(tmp_path, n=40, malformed=(), outlier_doses=()):
    lines = ["age,weight,cyp,dose"]
    rng = np.random.default_rng(7)
    for i in range(n):
        age_lo = 10 * int(rng.integers(2, 8))
        age = f"{age_lo} - {age_lo + 9}"
        weight = f"{rng.uniform(45, 110):.1f}"
        cyp = ["*1/*1", "*1/*3", "*3/*3"][int(rng.integers(0, 3))]
        dose = f"{rng.uniform(7, 84):.1f}"
        lines.append(f"{age},{weight},{cyp},{dose}")
    for bad in malformed:
        lines.append(bad)
    for dose in outlier_doses:
        lines.append(f"30 - 39,70.0,*1/*1,{dose}")
    path = tmp_path / "cohort.csv"
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "columns": [
            {"name": "age", "role": "qia", "kind": "interval"},
            {"name": "weight", "role": "ca"},
            {"name": "cyp", "role": "ca", "kind": "category",
             "categories": ["*1/*1", "*1/*3", "*3/*3"]},
            {"name": "dose", "role": "output", "drop_above": 300.0},
        ]
    }
    side_path = tmp_path / "cohort.sidecar.json"
    side_path.write_text(json.dumps(sidecar))
    return path, side_path


class TestIngestCsv:
    def test_parses_intervals_and_categories(self, tmp_path):
        path, side = _write_clinical_csv(tmp_path, n=25)
        data = ingest_csv(path, side)
        assert data.size == 25
        assert data.qia.shape == (25, 1)
        assert data.ca.shape == (25, 2)
        # interval "20 - 29" style cells collapse to their medians
        assert np.all(data.qia[:, 0] % 10 == 4.5)
        assert set(np.unique(data.ca[:, 1])) <= {0.0, 1.0, 2.0}
        # no declared ia column: row ids fill in
        assert np.array_equal(data.ia.ravel(), np.arange(25.0))

    def test_outlier_rule_drops_rows(self, tmp_path):
        path, side = _write_clinical_csv(tmp_path, n=20, outlier_doses=(315.0,))
        data = ingest_csv(path, side)
        assert data.size == 20
        assert data.dropped_outliers == 1

    def test_malformed_rows_skip_with_line_numbers(self, tmp_path):
        path, side = _write_clinical_csv(
            tmp_path, n=10,
            malformed=("20 - 29,not-a-number,*1/*1,30.0",
                       "20 - 29,70.0,*9/*9,30.0"))
        data = ingest_csv(path, side)
        assert data.size == 10
        lines = [line for line, _ in data.skipped_rows]
        assert lines == [12, 13]  # header is line 1

    def test_missing_declared_column_aborts(self, tmp_path):
        path, side = _write_clinical_csv(tmp_path, n=5)
        specs = load_sidecar(side)
        broken = tmp_path / "broken.csv"
        broken.write_text("age,weight,dose\n20 - 29,70.0,30.0\n")
        with pytest.raises(ValueError, match="cyp"):
            ingest_csv(broken, specs)

    def test_sidecar_must_declare_roles(self, tmp_path):
        path, side = _write_clinical_csv(tmp_path, n=5)
        with pytest.raises(ValueError):
            ingest_csv(path, [load_sidecar(side)[0]])

    def test_constant_column_maps_to_zero_with_warning(self, tmp_path):
        csv_path = tmp_path / "flat.csv"
        rows = ["x,z,y"] + [f"0.5,{i}.0,{i}.0" for i in range(12)]
        csv_path.write_text("\n".join(rows) + "\n")
        specs = (
            {"name": "x", "role": "qia"},
            {"name": "z", "role": "ca"},
            {"name": "y", "role": "output"},
        )
        from privcollab.harness import ColumnSpec, _apply_stats, _column_stats

        data = ingest_csv(csv_path, [ColumnSpec(**s) for s in specs])
        with pytest.warns(UserWarning, match="constant"):
            stats = _column_stats(data.inputs, data.columns[:2])
        normalized = _apply_stats(data.inputs, stats)
        assert np.all(normalized[:, 0] == 0.0)
        assert normalized[:, 1].min() == 0.0 and normalized[:, 1].max() == 1.0


class TestEmitReport:
    def test_outputs_and_byte_identical_rerun(self, tmp_path):
        report = run_experiment(ExperimentConfig(**SMALL))
        first = tmp_path / "first"
        second = tmp_path / "second"
        files = emit_report(report, first)
        assert {f.name for f in files} == {"results.csv", "summary.md"}
        emit_report(report, second)
        for name in ("results.csv", "summary.md", "plot_ae.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_rows_round_trip_through_csv(self, tmp_path):
        report = run_experiment(ExperimentConfig(**SMALL))
        emit_report(report, tmp_path)
        back = rows_from_csv(tmp_path / "results.csv")
        assert len(back) == len(report.rows)
        for orig, parsed in zip(report.rows, back):
            assert parsed["condition"] == orig["condition"]
            assert parsed["ae"] == orig["ae"]  # repr round-trip is exact
            assert parsed["rep"] == orig["rep"]

    def test_summary_mentions_each_condition(self, tmp_path):
        report = run_experiment(ExperimentConfig(**SMALL))
        emit_report(report, tmp_path)
        text = (tmp_path / "summary.md").read_text()
        assert "raw" in text and "tqma+bstd" in text
