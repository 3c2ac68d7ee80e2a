import csv
import json
import math
import tempfile
import pytest
import numpy as np
from pathlib import Path
from unittest import TestCase
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from dynasty.tensor import Tensor
from dynasty.config import ModelConfig, TrainConfig
from dynasty.data import (
    aggregate_static_consensus,
    fit_normalizer,
    generate_diffusion_dataset,
    normalize_dataset,
    split_dataset,
)
from dynasty.model import DynastyModel, ForecasterBase, ModelParameters
from dynasty.evaluation import (
    ABLATION_TOGGLES,
    SWEEP_COLUMNS,
    AblationSpec,
    ablation_splits,
    baseline_forecast,
    compute_metrics,
    evaluate_model,
    fan_out,
    run_ablation_suite,
    run_sensitivity_sweep,
    time_encoder,
    write_sweep,
)
from dynasty.exceptions import DynastyConfigError, DynastyContractError, DynastyDimensionError


TINY_MODEL = ModelConfig(
    feature_dim=1,
    hidden_dim=8,
    num_heads=2,
    num_layers=1,
    history_len=4,
    horizon=2,
    bias_mlp_hidden=8,
    bias_mlp_layers=1,
)
TINY_TRAIN = TrainConfig(
    max_epochs=2,
    pretrain_epochs=1,
    batch_size=4,
    curriculum_start_horizon=1,
)
ERRORS = st.floats(-1e3, 1e3, allow_nan=False)


def tiny_splits(num_samples=10, **kwargs):
    params = dict(N=4, D=1, L=4, H=2, graph_switch_prob=0.2, noise_std=0.05, seed=0, avg_degree=1.5)
    params.update(kwargs)
    dataset = generate_diffusion_dataset(num_samples=num_samples, **params)
    train, val, test = split_dataset(dataset)
    stats = fit_normalizer(train)
    return tuple(normalize_dataset(part, stats) for part in (train, val, test))


class PersistenceStub(ForecasterBase):
    """
    Repeats the last observed frame over the horizon.
    """

    kind = "persistence"
    uses_graph = False

    @classmethod
    def init_parameters(cls, config):
        return ModelParameters({})

    def forecast(self, X_hist, A_hist, mode=None, train=False, rng=None, horizon=None):
        X = np.asarray(X_hist)
        steps = horizon or self.config.horizon
        return Tensor(np.repeat(X[..., -1:], steps, axis=-1))


class MetricsTestCase(TestCase):
    def test_perfect(self):
        Y = np.random.default_rng(0).standard_normal((3, 2, 4))
        metrics = compute_metrics(Y, Y)
        self.assertEqual((metrics.mae, metrics.rmse), (0.0, 0.0))
        self.assertEqual(metrics.mae_per_step, [0.0] * 4)

    def test_hand_oracle(self):
        metrics = compute_metrics(np.array([[[1.0, 2.0]]]), np.zeros((1, 1, 2)))
        self.assertEqual(metrics.mae, 1.5)
        self.assertAlmostEqual(metrics.rmse, math.sqrt(2.5), places=15)
        self.assertEqual(metrics.mae_per_step, [1.0, 2.0])
        self.assertEqual(metrics.rmse_per_step, [1.0, 2.0])

    def test_shapes(self):
        with pytest.raises(DynastyDimensionError):
            compute_metrics(np.zeros((2, 1, 3)), np.zeros((2, 1, 2)))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (2, 3, 4), elements=ERRORS))
    def test_rmse_bounds_mae(self, error):
        metrics = compute_metrics(error, np.zeros_like(error))
        self.assertGreaterEqual(metrics.rmse, metrics.mae)
        for mae, rmse in zip(metrics.mae_per_step, metrics.rmse_per_step):
            self.assertGreaterEqual(rmse, mae)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6, 2, 3), elements=ERRORS), st.randoms(use_true_random=False))
    def test_sample_order(self, error, random):
        order = list(range(6))
        random.shuffle(order)
        first = compute_metrics(error, np.zeros_like(error))
        second = compute_metrics(error[order], np.zeros_like(error))
        self.assertAlmostEqual(first.mae, second.mae, delta=1e-9)
        self.assertAlmostEqual(first.rmse, second.rmse, delta=1e-9)


class EvaluateTestCase(TestCase):
    def test_persistence_on_frozen_dynamics(self):
        train, _, test = tiny_splits(beta=0.0, noise_std=0.0, constant_signals=True)
        report = evaluate_model(PersistenceStub(TINY_MODEL), test, test.norm_stats)
        self.assertEqual((report.mae, report.rmse), (0.0, 0.0))
        self.assertEqual(report.sample_count, len(test))
        self.assertEqual(report.provenance["model_kind"], "persistence")

    def test_stable_report(self):
        _, _, test = tiny_splits()
        model = DynastyModel(TINY_MODEL)
        first = evaluate_model(model, test, test.norm_stats)
        second = evaluate_model(model, test, test.norm_stats)

        self.assertEqual(first.to_dict(), second.to_dict())
        self.assertNotIn("wall_seconds", first.to_dict())
        with tempfile.TemporaryDirectory() as tmp:
            first.write_json(Path(tmp, "a.json"))
            second.write_json(Path(tmp, "b.json"))
            self.assertEqual(Path(tmp, "a.json").read_bytes(), Path(tmp, "b.json").read_bytes())

    def test_raw_units(self):
        _, _, test = tiny_splits()
        model = PersistenceStub(TINY_MODEL)
        report = evaluate_model(model, test, test.norm_stats)

        stats = test.norm_stats
        X, _, Y = test.arrays()
        expected = compute_metrics(
            stats.invert(np.repeat(X[..., -1:], 2, axis=-1)), stats.invert(Y)
        )
        self.assertAlmostEqual(report.rmse, expected.rmse, places=12)

    def test_contracts(self):
        _, _, test = tiny_splits()
        model = DynastyModel(TINY_MODEL)
        with pytest.raises(DynastyContractError):
            evaluate_model(model, test, None)

        other_stats = fit_normalizer(tiny_splits(seed=5)[0])
        with pytest.raises(DynastyContractError):
            evaluate_model(model, test, other_stats)

        with pytest.raises(DynastyContractError) as e:
            evaluate_model(DynastyModel(TINY_MODEL, num_nodes=6), test, test.norm_stats)
        self.assertIn("N=6", str(e.value))
        self.assertIn("N=4", str(e.value))

    def test_baseline(self):
        splits = tiny_splits()
        first_model, first = baseline_forecast(splits, TINY_MODEL, TINY_TRAIN)
        _, second = baseline_forecast(splits, TINY_MODEL, TINY_TRAIN)
        self.assertEqual(first.to_dict(), second.to_dict())
        self.assertEqual(first.provenance["model_kind"], "recurrent-baseline")

        test = splits[2]
        X, A, _ = test.arrays()
        np.testing.assert_array_equal(first_model.predict(X, A), first_model.predict(X, A * 0.0))


class AblationSpecTestCase(TestCase):
    def test_defaults(self):
        spec = AblationSpec()
        self.assertEqual(tuple(spec.toggles), ABLATION_TOGGLES)
        self.assertEqual(spec.seeds, [0, 1, 2])

    def test_from_dict(self):
        spec = AblationSpec.from_dict(
            {"toggles": ["full", "no_edge_bias"], "seeds": [4], "model": {"hidden_dim": 8, "num_heads": 2}}
        )
        self.assertEqual(spec.model.hidden_dim, 8)
        self.assertEqual(AblationSpec.from_dict(spec.to_dict()), spec)

        for bad in [
            {"toggles": ["full", "no_graph"]},
            {"toggles": []},
            {"toggles": ["full", "full"]},
            {"seeds": []},
            {"epochs": 3},
            {"model": {"hidden_size": 3}},
        ]:
            with pytest.raises(DynastyConfigError):
                AblationSpec.from_dict(bad)


class AblationSplitsTestCase(TestCase):
    def setUp(self):
        self.splits = tiny_splits(num_samples=20, N=6, avg_degree=2.0, graph_switch_prob=0.5)

    def test_static(self):
        train = self.splits[0]
        consensus = aggregate_static_consensus(train, 0.5)
        for part in ablation_splits("static_graph", 0, self.splits):
            for s in part:
                for t in range(4):
                    np.testing.assert_array_equal(s.A_hist[..., t], consensus)

    def test_shuffled(self):
        train, val, test = ablation_splits("shuffled_graph", 0, self.splits)
        self.assertEqual(train.provenance["graph"], "shuffled")
        self.assertIs(test, self.splits[2])
        moved = [
            not np.array_equal(a.A_hist, b.A_hist) for a, b in zip(train, self.splits[0])
        ]
        self.assertTrue(all(moved))

        again = ablation_splits("shuffled_graph", 0, self.splits)[0]
        for a, b in zip(train, again):
            np.testing.assert_array_equal(a.A_hist, b.A_hist)

    def test_untouched(self):
        for toggle in ["full", "no_edge_bias", "no_pretraining", "no_variation_loss", "temporal_attention_on"]:
            self.assertIs(ablation_splits(toggle, 0, self.splits), self.splits)


class AblationSuiteTestCase(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.splits = tiny_splits()
        spec = AblationSpec(
            toggles=["full", "no_edge_bias", "no_variation_loss"],
            seeds=[0],
            model=TINY_MODEL,
            train=TINY_TRAIN,
        )
        cls.table = run_ablation_suite(spec, cls.splits)

    def test_rows(self):
        self.assertEqual(
            [row.config for row in self.table.summary], ["full", "no_edge_bias", "no_variation_loss"]
        )
        self.assertEqual([(c.config, c.seed) for c in self.table.cells], [
            ("full", 0), ("no_edge_bias", 0), ("no_variation_loss", 0)
        ])
        for row in self.table.summary:
            self.assertEqual(row.rmse_std, 0.0)
            self.assertEqual(row.seeds, 1)
        self.assertEqual(self.table.summary_for("full").worse_than_full, 0)

        with pytest.raises(DynastyConfigError):
            self.table.summary_for("static_graph")

    def test_edge_bias_matters(self):
        full = self.table.summary_for("full").rmse_mean
        self.assertNotEqual(full, self.table.summary_for("no_edge_bias").rmse_mean)

    def test_write(self):
        with tempfile.TemporaryDirectory() as tmp:
            json_path, cells_path, summary_path = self.table.write(tmp)
            data = json.loads(json_path.read_text())
            with open(cells_path, newline="") as csv_file:
                cells = list(csv.DictReader(csv_file))
            with open(summary_path, newline="") as csv_file:
                summary = list(csv.DictReader(csv_file))

        self.assertEqual(set(data), {"summary", "cells"})
        self.assertEqual(len(cells), 3)
        self.assertIn("rmse_step_2", cells[0])
        self.assertEqual([row["config"] for row in summary], ["full", "no_edge_bias", "no_variation_loss"])

    def test_reproducible(self):
        spec = AblationSpec(toggles=["full"], seeds=[0], model=TINY_MODEL, train=TINY_TRAIN)
        again = run_ablation_suite(spec, self.splits)
        self.assertEqual(again.cells[0].report.to_dict(), self.table.cells[0].report.to_dict())

    def test_unnormalised(self):
        raw = generate_diffusion_dataset(4, 1, 4, 2, 3, 0.2, 0.05, seed=0)
        with pytest.raises(DynastyContractError):
            run_ablation_suite(AblationSpec(toggles=["full"], seeds=[0]), (raw, raw, raw))


class SweepTestCase(TestCase):
    def test_sweep(self):
        splits = tiny_splits()
        rows = run_sensitivity_sweep("num_layers", [0, 1], splits, TINY_MODEL, TINY_TRAIN, seeds=[0, 1])

        self.assertEqual([(r.value, r.seed) for r in rows], [(0, 0), (0, 1), (1, 0), (1, 1)])
        self.assertTrue(all(r.rmse >= r.mae for r in rows))
        self.assertTrue(all(r.train_seconds_per_epoch > 0 for r in rows))

        with tempfile.TemporaryDirectory() as tmp:
            csv_path, json_path = write_sweep(rows, tmp)
            with open(csv_path, newline="") as csv_file:
                reader = csv.DictReader(csv_file)
                self.assertEqual(tuple(reader.fieldnames), SWEEP_COLUMNS)
                self.assertEqual(len(list(reader)), 4)
            self.assertEqual(len(json.loads(json_path.read_text())), 4)

    def test_errors(self):
        splits = tiny_splits()
        with pytest.raises(DynastyConfigError):
            run_sensitivity_sweep("learning_rate", [1], splits, TINY_MODEL, TINY_TRAIN)

        with pytest.raises(DynastyConfigError):
            run_sensitivity_sweep("num_heads", [3], splits, TINY_MODEL, TINY_TRAIN)

        with pytest.raises(DynastyConfigError):
            run_sensitivity_sweep("num_heads", [], splits, TINY_MODEL, TINY_TRAIN)


class RuntimeTestCase(TestCase):
    def test_time_encoder(self):
        seconds = time_encoder(TINY_MODEL, 6, repeats=3)
        self.assertGreater(seconds, 0.0)

        with pytest.raises(DynastyConfigError):
            time_encoder(TINY_MODEL, 6, repeats=0)

    def test_fan_out_order(self):
        self.assertEqual(fan_out([lambda i=i: i * i for i in range(5)]), [0, 1, 4, 9, 16])
