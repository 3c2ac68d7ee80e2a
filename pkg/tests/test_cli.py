import io
import csv
import json
import tempfile
import contextlib
import numpy as np
from pathlib import Path
from unittest import TestCase
from dynasty.cli import parse_and_dispatch
from dynasty.data import load_dataset
from dynasty.storage import write_bundle
from dynasty.version import __version__


MODEL = {
    "feature_dim": 1,
    "hidden_dim": 8,
    "num_heads": 2,
    "num_layers": 1,
    "history_len": 4,
    "horizon": 2,
    "bias_mlp_hidden": 8,
    "bias_mlp_layers": 1,
}
TRAIN = {"max_epochs": 2, "pretrain_epochs": 1, "batch_size": 4, "curriculum_start_horizon": 1}


def dispatch(*argv):
    stdout, stderr = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
        code = parse_and_dispatch([str(arg) for arg in argv])
    return code, stdout.getvalue(), stderr.getvalue()


def write_json(path, data):
    Path(path).write_text(json.dumps(data))
    return path


class CLITestCase(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.config = write_json(
            cls.root / "config.json",
            {
                "model": MODEL,
                "train": TRAIN,
                "data": {"source": "diffusion", "N": 4, "num_samples": 10, "avg_degree": 1.5},
            },
        )
        cls.data = cls.root / "data"
        code, _, stderr = dispatch("generate", "--config", cls.config, "--out", cls.data)
        assert code == 0, stderr

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.out = Path(tmp.name)

    def test_generate(self):
        dataset = load_dataset(self.data)
        self.assertEqual(dataset.dims, (4, 1, 4, 2))
        self.assertTrue((self.data / "generate.manifest.json").exists())

        code, _, _ = dispatch("generate", "--config", self.config, "--out", self.out / "d", "--seed", 9)
        self.assertEqual(code, 0)
        other = load_dataset(self.out / "d")
        self.assertEqual(other.provenance["seed"], 9)
        self.assertFalse(np.array_equal(other[0].X_hist, dataset[0].X_hist))

    def test_train_and_eval(self):
        run_dir = self.out / "run"
        code, _, stderr = dispatch(
            "train", "--config", self.config, "--data", self.data, "--out", run_dir
        )
        self.assertEqual(code, 0, stderr)
        for name in ("model.ckpt", "pretrain.ckpt", "stats.json", "history.csv", "train.manifest.json"):
            self.assertTrue((run_dir / name).exists(), name)
        self.assertFalse((run_dir / "report.json").exists())

        code, stdout, stderr = dispatch("eval", "--data", self.data, "--out", run_dir, "-F", "json")
        self.assertEqual(code, 0, stderr)
        self.assertIn("rmse", stdout)
        report = json.loads((run_dir / "report.json").read_text())
        self.assertEqual(report["sample_count"], 2)
        self.assertTrue((run_dir / "eval.manifest.json").exists())

    def test_eval_node_mismatch(self):
        run_dir = self.out / "run"
        code, _, stderr = dispatch(
            "train", "--config", self.config, "--data", self.data, "--out", run_dir, "--skip-pretrain"
        )
        self.assertEqual(code, 0, stderr)
        self.assertFalse((run_dir / "pretrain.ckpt").exists())

        wide = write_json(
            self.out / "wide.json",
            {"model": MODEL, "data": {"source": "diffusion", "N": 5, "num_samples": 10}},
        )
        self.assertEqual(dispatch("generate", "--config", wide, "--out", self.out / "wide")[0], 0)

        code, _, stderr = dispatch("eval", "--data", self.out / "wide", "--out", run_dir)
        self.assertEqual(code, 2)
        self.assertIn("N=4", stderr)
        self.assertIn("N=5", stderr)

    def test_missing_files(self):
        code, _, stderr = dispatch("eval", "--data", self.out / "nothing", "--out", self.out)
        self.assertEqual(code, 2)
        self.assertIn("nothing", stderr)

        code, _, _ = dispatch("eval", "--data", self.data, "--out", self.out)
        self.assertEqual(code, 2)

        code, _, _ = dispatch("train", "--config", self.out / "none.json", "--data", self.data, "--out", self.out)
        self.assertEqual(code, 2)

    def test_bad_config(self):
        bad = write_json(self.out / "bad.json", {"model": {"hidden_dim": 6, "num_heads": 4}})
        code, _, stderr = dispatch("train", "--config", bad, "--data", self.data, "--out", self.out)
        self.assertEqual(code, 2)
        self.assertIn("hidden_dim", stderr)

    def test_usage_errors(self):
        code, _, stderr = dispatch("train", "--foo")
        self.assertEqual(code, 1)
        self.assertIn("--foo", stderr)

        self.assertEqual(dispatch("frobnicate")[0], 1)
        self.assertEqual(dispatch("train", "--data", self.data)[0], 1)
        self.assertEqual(dispatch("aggregate-static", "--data", self.data, "--out", self.out, "--mode", "mean")[0], 1)

        code, _, stderr = dispatch(
            "sweep", "--config", self.config, "--data", self.data, "--out", self.out,
            "--parameter", "num_layers", "--values", "one,two",
        )
        self.assertEqual(code, 1)
        self.assertIn("--values", stderr)

    def test_version(self):
        code, stdout, _ = dispatch("--version")
        self.assertEqual(code, 0)
        self.assertEqual(stdout.strip(), __version__)

    def test_run(self):
        run_dir = self.out / "run"
        code, stdout, stderr = dispatch(
            "run", "--config", self.config, "--out", run_dir, "--data", self.data, "--seed", 1
        )
        self.assertEqual(code, 0, stderr)
        self.assertIn("rmse", stdout)
        manifest = json.loads((run_dir / "run.manifest.json").read_text())
        self.assertEqual(manifest["seed"], 1)
        self.assertEqual(manifest["config"]["model"]["init_seed"], 1)

    def test_pretrain(self):
        code, _, stderr = dispatch(
            "pretrain", "--config", self.config, "--data", self.data, "--out", self.out
        )
        self.assertEqual(code, 0, stderr)
        for name in ("pretrain.ckpt", "pretrain_history.csv", "stats.json", "pretrain.manifest.json"):
            self.assertTrue((self.out / name).exists(), name)

    def test_aggregate_static(self):
        code, _, stderr = dispatch(
            "aggregate-static", "--data", self.data, "--out", self.out / "static", "--mode", "union"
        )
        self.assertEqual(code, 0, stderr)
        graph = np.array(json.loads((self.out / "static" / "static_graph.json").read_text()))
        dataset = load_dataset(self.out / "static")
        for sample in dataset:
            for t in range(4):
                np.testing.assert_array_equal(sample.A_hist[..., t], graph)
        self.assertEqual(dataset.provenance["graph"], "static-union")

    def test_ingest_edges(self):
        edges = self.out / "edges.csv"
        with open(edges, "w", newline="") as csv_file:
            writer = csv.writer(csv_file)
            writer.writerow(["source", "target", "rating", "timestamp"])
            writer.writerows([("a", "b", 3, 0), ("b", "c", -2, 15), ("c", "a", 1, 25), ("a", "c", 4, 35)])
        config = write_json(
            self.out / "edges.json",
            {"model": {"history_len": 2, "horizon": 1}, "data": {"interval_seconds": 10}},
        )
        code, _, stderr = dispatch("ingest-edges", "--data", edges, "--out", self.out / "d", "--config", config)
        self.assertEqual(code, 0, stderr)
        dataset = load_dataset(self.out / "d")
        self.assertEqual(dataset.dims, (3, 2, 2, 1))
        self.assertEqual(dataset.provenance["node_ids"], ["a", "b", "c"])

    def test_window_corr(self):
        rng = np.random.default_rng(0)
        write_bundle(
            self.out / "series",
            {"s1": rng.standard_normal((3, 60)), "s2": rng.standard_normal((3, 60))},
            {},
        )
        config = write_json(
            self.out / "corr.json",
            {
                "model": {"history_len": 4, "horizon": 2},
                "data": {"window": 10, "stride": 5, "corr_threshold": 0.5},
            },
        )
        code, _, stderr = dispatch(
            "window-corr", "--data", self.out / "series", "--out", self.out / "d", "--config", config
        )
        self.assertEqual(code, 0, stderr)
        dataset = load_dataset(self.out / "d")
        self.assertEqual(len(dataset), 12)
        self.assertEqual(dataset.provenance["stream"], "multi")

    def test_ablate(self):
        spec = write_json(self.out / "spec.json", {"toggles": ["full", "no_pretraining"], "seeds": [3, 4]})
        code, _, stderr = dispatch(
            "ablate", "--config", self.config, "--data", self.data, "--out", self.out / "ablation",
            "--ablation-spec", spec, "--seeds", "0",
        )
        self.assertEqual(code, 0, stderr)

        with open(self.out / "ablation" / "ablation.csv", newline="") as csv_file:
            rows = list(csv.DictReader(csv_file))
        self.assertEqual([(r["config"], r["seed"]) for r in rows], [("full", "0"), ("no_pretraining", "0")])
        self.assertTrue((self.out / "ablation" / "ablation_summary.csv").exists())
        self.assertTrue((self.out / "ablation" / "ablate.manifest.json").exists())

    def test_sweep(self):
        code, _, stderr = dispatch(
            "sweep", "--config", self.config, "--data", self.data, "--out", self.out / "sweep",
            "--parameter", "num_layers", "--values", "0,1",
        )
        self.assertEqual(code, 0, stderr)
        with open(self.out / "sweep" / "sweep.csv", newline="") as csv_file:
            rows = list(csv.DictReader(csv_file))
        self.assertEqual([r["value"] for r in rows], ["0", "1"])

        code, _, stderr = dispatch(
            "sweep", "--config", self.config, "--data", self.data, "--out", self.out / "sweep",
            "--parameter", "learning_rate", "--values", "1",
        )
        self.assertEqual(code, 2)
        self.assertIn("learning_rate", stderr)
