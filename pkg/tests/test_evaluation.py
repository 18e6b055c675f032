import json

import numpy as np
import pytest

import featnorm.autodiff as ad
from featnorm.datagen import DomainSpec, generate_scenario
from featnorm.errors import ConfigurationError, ContractError
from featnorm.evaluation import (
    CSV_COLUMNS,
    ExperimentConfig,
    MetricsReport,
    RunRecord,
    embeddings_from_text,
    embeddings_to_text,
    evaluate_accuracy,
    export_embeddings,
    run_category_shift_experiment,
    run_dg_experiment,
    run_sensitivity_sweep,
)
from featnorm.network import NetworkSpec, forward_features, forward_logits, init_params

K, D = 3, 2
SPEC = NetworkSpec(input_dim=D, hidden_dims=(), feature_dim=D, num_classes=K)


def tiny_scenario(noise=0.25, seed=0, n_per=30):
    specs = (
        DomainSpec.identity(D, noise, frozenset(range(K))),
        DomainSpec(0.25, 1.1, (0.5, 0.0), noise, frozenset(range(K))),
        DomainSpec(-0.25, 0.9, (0.0, 0.5), noise, frozenset(range(K))),
    )
    return generate_scenario(K, D, n_per, specs, seed=seed)


def tiny_config(**overrides):
    base = dict(
        scenario=tiny_scenario(),
        target_domain_index=2,
        network_spec=SPEC,
        regimes=("source_only", "fnn"),
        seeds=(1, 2),
        epochs=2,
        batch_size=10,
        experiment_id="tiny",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def oracle_params(scenario):
    """Identity features, head = prototype matrix: nearest-prototype classifier."""
    params = init_params(SPEC, seed=0)
    params.layers[0][0].values[:] = np.eye(D)
    params.layers[0][1].values[:] = 0.0
    params.layers[1][0].values[:] = scenario.class_prototypes.T
    params.layers[1][1].values[:] = 0.0
    return params


class TestEvaluateAccuracy:
    def test_oracle_classifier_on_noise_free_target(self):
        sc = tiny_scenario(noise=0.0)
        assert evaluate_accuracy(oracle_params(sc), sc, 0) == 1.0

    def test_constant_logits_tie_break_to_class_zero(self):
        sc = tiny_scenario()
        params = init_params(SPEC, seed=0)
        for w, b in params.layers:
            w.values[:] = 0.0
            b.values[:] = 0.0
        accuracy = evaluate_accuracy(params, sc, 1)
        labels = sc.labels[sc.domain_mask(1)]
        assert accuracy == np.count_nonzero(labels == 0) / labels.size  # balanced: 1/K

    def test_matches_brute_force_recount(self):
        sc = tiny_scenario()
        params = init_params(SPEC, seed=4)
        accuracy = evaluate_accuracy(params, sc, 2)

        mask = sc.domain_mask(2)
        logits = forward_logits(params, forward_features(params, ad.constant(sc.features[mask])))
        correct = 0
        for row, label in zip(logits.values, sc.labels[mask]):
            best = 0
            for k in range(1, K):
                if row[k] > row[best]:
                    best = k
            correct += int(best == label)
        assert accuracy == correct / np.count_nonzero(mask)

    def test_empty_target_rejected(self):
        sc = tiny_scenario()
        with pytest.raises(ContractError):
            evaluate_accuracy(init_params(SPEC, 0), sc, 7)


class TestExperimentConfig:
    def test_target_out_of_range(self):
        with pytest.raises(ConfigurationError):
            tiny_config(target_domain_index=3)

    def test_unknown_regime(self):
        with pytest.raises(ConfigurationError):
            tiny_config(regimes=("fnn", "dann"))

    def test_empty_seeds(self):
        with pytest.raises(ConfigurationError):
            tiny_config(seeds=())

    def test_indivisible_batch_size(self):
        with pytest.raises(ConfigurationError):
            tiny_config(batch_size=9)

    def test_sources_exclude_target(self):
        assert tiny_config(target_domain_index=1).sources() == (0, 2)


class TestRunDgExperiment:
    def test_report_shape_and_means(self):
        cfg = tiny_config()
        report = run_dg_experiment(cfg)
        assert len(report.records) == len(cfg.regimes) * len(cfg.seeds)
        for regime in cfg.regimes:
            per_seed = [
                r.accuracy for r in report.records if r.regime == regime
            ]
            assert report.mean_accuracy(regime) == pytest.approx(sum(per_seed) / len(per_seed))
        assert report.target_samples_consumed == 0

    def test_deterministic_csv(self):
        cfg_a, cfg_b = tiny_config(), tiny_config()
        assert run_dg_experiment(cfg_a).to_csv() == run_dg_experiment(cfg_b).to_csv()

    def test_csv_columns_and_parse(self):
        report = run_dg_experiment(tiny_config())
        lines = report.to_csv().strip().split("\n")
        assert lines[0] == ",".join(CSV_COLUMNS)
        first = dict(zip(CSV_COLUMNS, lines[1].split(",")))
        assert first["experiment_id"] == "tiny"
        assert first["category_shift_flag"] == "0"
        assert 0.0 <= float(first["accuracy"]) <= 1.0
        assert first["degraded_accuracy"] == "" and first["transfer_gain"] == ""

    def test_json_document_recomputable(self):
        report = run_dg_experiment(tiny_config())
        doc = json.loads(report.to_json_text())
        assert doc["target_samples_consumed"] == 0
        for summary in doc["summary"]:
            runs = [
                r["accuracy"]
                for r in doc["runs"]
                if r["regime"] == summary["regime"]
                and r["category_shift"] == summary["category_shift"]
                and r["delta_r"] == summary["delta_r"]
            ]
            assert summary["mean_accuracy"] == pytest.approx(float(np.mean(runs)), abs=1e-15)
            assert summary["std_accuracy"] == pytest.approx(float(np.std(runs)), abs=1e-15)


class TestCategoryShiftExperiment:
    def test_requires_removal_map(self):
        with pytest.raises(ConfigurationError):
            run_category_shift_experiment(tiny_config())

    def test_source_only_gain_exactly_zero_and_fields_recompute(self):
        cfg = tiny_config(category_shift={0: {0}, 1: {1}}, regimes=("source_only", "fnn"))
        report = run_category_shift_experiment(cfg)
        shift_rows = [r for r in report.records if r.category_shift]
        full_rows = {(r.regime, r.seed): r for r in report.records if not r.category_shift}
        source_shift = {r.seed: r.accuracy for r in shift_rows if r.regime == "source_only"}
        for row in shift_rows:
            if row.regime == "source_only":
                assert row.transfer_gain == 0.0
            full = full_rows[(row.regime, row.seed)]
            assert abs(row.degraded_accuracy - (row.accuracy - full.accuracy)) <= 1e-12
            assert abs(row.transfer_gain - (row.accuracy - source_shift[row.seed])) <= 1e-12

    def test_source_only_forced_in_when_missing(self):
        cfg = tiny_config(category_shift={0: {0}}, regimes=("fnn",))
        report = run_category_shift_experiment(cfg)
        assert any(r.regime == "source_only" for r in report.records)

    def test_removal_touching_target_rejected_before_training(self):
        cfg = tiny_config(category_shift={2: {0}})
        with pytest.raises(ConfigurationError):
            run_category_shift_experiment(cfg)


class TestSensitivitySweep:
    def test_needs_two_values(self):
        with pytest.raises(ConfigurationError):
            run_sensitivity_sweep(tiny_config(delta_r_values=(1.0,)))

    def test_repeated_value_gives_identical_rows(self):
        cfg = tiny_config(delta_r_values=(1.0, 1.0), regimes=("fnn",))
        report = run_sensitivity_sweep(cfg)
        half = len(report.records) // 2
        first, second = report.records[:half], report.records[half:]
        assert [r.accuracy for r in first] == [r.accuracy for r in second]

    def test_sweep_covers_grid(self):
        cfg = tiny_config(delta_r_values=(0.5, 1.0), regimes=("fnn",), seeds=(1,))
        report = run_sensitivity_sweep(cfg)
        assert [r.delta_r for r in report.records] == [0.5, 1.0]


class TestEmbeddings:
    def test_line_count_and_round_trip(self, tmp_path):
        sc = tiny_scenario(n_per=10)
        params = init_params(SPEC, seed=6)
        path = tmp_path / "embeddings.txt"
        export_embeddings(params, sc, path)
        text = path.read_text(encoding="utf-8")
        assert len(text.strip().split("\n")) == sc.n_samples

        indices, domains, labels, features = embeddings_from_text(text)
        expected = forward_features(params, ad.constant(sc.features)).values
        assert np.array_equal(features, expected)
        assert np.array_equal(indices, np.arange(sc.n_samples))
        assert np.array_equal(domains, sc.domain_indices)
        assert np.array_equal(labels, sc.labels)

    def test_zero_weight_model_zero_features(self):
        sc = tiny_scenario(n_per=5)
        params = init_params(SPEC, seed=0)
        for w, b in params.layers:
            w.values[:] = 0.0
            b.values[:] = 0.0
        _, _, _, features = embeddings_from_text(embeddings_to_text(params, sc))
        assert np.array_equal(features, np.zeros_like(features))


class TestMetricsReportHelpers:
    def test_filters(self):
        records = [
            RunRecord("x", "fnn", 1, 0, False, 1.0, 0.5),
            RunRecord("x", "fnn", 2, 0, False, 1.0, 0.7),
            RunRecord("x", "fnn", 1, 0, False, 0.5, 0.9),
            RunRecord("x", "cfnn", 1, 0, True, 1.0, 0.8, -0.05, 0.1),
        ]
        report = MetricsReport("x", records)
        assert report.accuracies("fnn", delta_r=1.0) == [0.5, 0.7]
        assert report.mean_accuracy("fnn", delta_r=1.0) == pytest.approx(0.6)
        assert report.accuracies("cfnn", category_shift=True) == [0.8]
        assert report.mean_transfer_gain("cfnn") == pytest.approx(0.1)
        assert report.mean_degraded_accuracy("cfnn") == pytest.approx(-0.05)
