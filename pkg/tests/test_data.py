import tempfile
import pytest
import numpy as np
from pathlib import Path
from unittest import TestCase
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from dynasty.data import (
    Dataset,
    DynamicGraphSample,
    NormStats,
    TemporalEdgeRecord,
    aggregate_static_consensus,
    aggregate_static_union,
    bucket_edge_records,
    correlation_windows,
    denormalize_dataset,
    derangement,
    diffusion_step,
    fit_normalizer,
    generate_diffusion_dataset,
    ingest_edge_list,
    load_dataset,
    load_series,
    make_static_variant,
    node_index,
    normalize_dataset,
    pearson_correlation,
    read_edge_csv,
    row_normalize,
    save_dataset,
    shuffle_graphs,
    split_dataset,
    split_sizes,
    transform,
    window_correlation_cohort,
    window_correlation_graphs,
)
from dynasty.storage import write_bundle
from dynasty.exceptions import (
    DynastyConfigError,
    DynastyContractError,
    DynastyDataError,
    DynastyDimensionError,
)


PATH_GRAPH = np.array(
    [
        [0.0, 1.0, 0.0, 0.0],
        [1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
    ]
)
HOUR = 3600


def diffusion(num_samples=10, seed=0, **kwargs):
    params = dict(N=5, D=2, L=4, H=3, graph_switch_prob=0.3, noise_std=0.05)
    params.update(kwargs)
    return generate_diffusion_dataset(num_samples=num_samples, seed=seed, **params)


def rating_stream(intervals=25):
    nodes = ["1", "2", "3"]
    return [
        TemporalEdgeRecord(nodes[k % 3], nodes[(k + 1) % 3], 1 + k % 5, k * HOUR)
        for k in range(intervals)
    ]


def toy_sample(sample_id, X, Y):
    X = np.asarray(X, dtype=np.float64)
    N, _, L = X.shape
    return DynamicGraphSample(X, np.zeros((N, N, L)), Y, sample_id)


class SampleTestCase(TestCase):
    def test_shapes(self):
        with pytest.raises(DynastyDimensionError):
            DynamicGraphSample(np.zeros((3, 1, 4)), np.zeros((3, 3, 5)), np.zeros((3, 1, 2)), "a")

        with pytest.raises(DynastyDimensionError):
            DynamicGraphSample(np.zeros((3, 1, 4)), np.zeros((3, 3, 4)), np.zeros((3, 2, 2)), "a")

        with pytest.raises(DynastyDataError):
            DynamicGraphSample(np.full((3, 1, 4), np.inf), np.zeros((3, 3, 4)), np.zeros((3, 1, 2)), "a")

    def test_dataset(self):
        a = toy_sample("a", np.zeros((2, 1, 3)), np.zeros((2, 1, 2)))
        b = toy_sample("b", np.zeros((2, 1, 3)), np.zeros((2, 1, 1)))

        with pytest.raises(DynastyDimensionError):
            Dataset([a, b])

        with pytest.raises(DynastyDataError):
            Dataset([a, a])

        dataset = Dataset([a])
        self.assertEqual(dataset.dims, (2, 1, 3, 2))
        X, A, Y = dataset.arrays()
        self.assertEqual((X.shape, A.shape, Y.shape), ((1, 2, 1, 3), (1, 2, 2, 3), (1, 2, 1, 2)))

        with pytest.raises(DynastyConfigError):
            Dataset([]).dims


class DiffusionTestCase(TestCase):
    def test_step(self):
        x = np.array([[1.0], [2.0], [3.0], [4.0]])
        np.testing.assert_allclose(diffusion_step(x, PATH_GRAPH, 0.5)[:, 0], [1.5, 2.0, 3.0, 3.5])

    def test_row_normalize(self):
        A = np.array([[0.0, 2.0, 2.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(
            row_normalize(A), [[0.0, 0.5, 0.5], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
        )

    def test_seeded(self):
        first, second = diffusion(), diffusion()
        self.assertEqual(first.sample_ids, [f"diffusion-{i:05d}" for i in range(10)])
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.X_hist, b.X_hist)
            np.testing.assert_array_equal(a.A_hist, b.A_hist)
            np.testing.assert_array_equal(a.Y, b.Y)

        other = diffusion(seed=1)
        self.assertFalse(np.array_equal(first[0].X_hist, other[0].X_hist))

    def test_frozen_dynamics(self):
        dataset = diffusion(beta=0.0, noise_std=0.0, constant_signals=True)
        for s in dataset:
            for h in range(3):
                np.testing.assert_array_equal(s.Y[..., h], s.X_hist[..., -1])
            np.testing.assert_array_equal(s.X_hist[:, 0], s.X_hist[:, 1])

    def test_graphs(self):
        for s in diffusion(graph_switch_prob=0.0):
            for t in range(4):
                A = s.A_hist[..., t]
                np.testing.assert_array_equal(A, s.A_hist[..., 0])
                np.testing.assert_array_equal(A, A.T)
                np.testing.assert_array_equal(np.diag(A), 0.0)

    def test_graph_dependence(self):
        # Identical starting signals diverge when only the graph differs.
        dataset = diffusion(num_samples=2, noise_std=0.0)
        x = dataset[0].X_hist[..., 0]
        y1 = diffusion_step(x, dataset[0].A_hist[..., 0], 0.5)
        y2 = diffusion_step(x, dataset[1].A_hist[..., 0], 0.5)
        self.assertFalse(np.allclose(y1, y2))

    def test_validation(self):
        with pytest.raises(DynastyConfigError):
            diffusion(avg_degree=5)

        with pytest.raises(DynastyConfigError):
            diffusion(graph_switch_prob=1.5)

        with pytest.raises(DynastyConfigError):
            diffusion(num_samples=0)

        with pytest.raises(DynastyConfigError):
            diffusion(noise_std=-1.0)


class EdgeListTestCase(TestCase):
    def test_single_record(self):
        ids, A, features = bucket_edge_records([TemporalEdgeRecord("u", "v", 5, 100)], HOUR)
        self.assertEqual(ids, ["u", "v"])
        np.testing.assert_array_equal(A[0], [[0.0, 5.0], [0.0, 0.0]])
        np.testing.assert_array_equal(features[0], [[5.0, 0.0], [0.0, 5.0]])

    def test_mean_rating(self):
        records = [TemporalEdgeRecord("1", "2", 4, 10), TemporalEdgeRecord("1", "2", 6, 20)]
        _, A, features = bucket_edge_records(records, HOUR)
        self.assertEqual(A[0, 0, 1], 5.0)
        self.assertEqual(features[0, 0, 0], 5.0)

    def test_self_rating(self):
        records = [TemporalEdgeRecord("1", "1", 9, 0), TemporalEdgeRecord("1", "2", 2, 0)]
        _, A, features = bucket_edge_records(records, HOUR)
        np.testing.assert_array_equal(np.diag(A[0]), 0.0)
        self.assertEqual(features[0, 0, 0], 2.0)

    def test_node_order(self):
        records = [TemporalEdgeRecord("10", "2", 1, 0), TemporalEdgeRecord("b", "a", 1, 0)]
        self.assertEqual(node_index(records), {"2": 0, "10": 1, "a": 2, "b": 3})

    def test_intervals(self):
        records = rating_stream()
        dataset = ingest_edge_list(records, HOUR, 12, 8)

        self.assertEqual(len(dataset), 6)
        self.assertEqual(dataset.dims, (3, 2, 12, 8))
        self.assertEqual(dataset.provenance["stream"], "single")
        self.assertEqual(dataset.sample_ids[0], "window-00000")
        np.testing.assert_array_equal(dataset[1].X_hist[..., 0], dataset[0].X_hist[..., 1])

        with pytest.raises(DynastyDataError):
            ingest_edge_list(records[:19], HOUR, 12, 8)

        with pytest.raises(DynastyConfigError):
            ingest_edge_list([], HOUR, 12, 8)

    def test_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp, "edges.csv")
            path.write_text("source,target,rating,timestamp\n1,2,5,100\n2, 3,-1,3700\n")
            records = read_edge_csv(path)
            self.assertEqual(records[1], TemporalEdgeRecord("2", "3", -1.0, 3700))

            path.write_text("source,target,timestamp\n1,2,100\n")
            with pytest.raises(DynastyDataError) as e:
                read_edge_csv(path)
            self.assertIn("rating", str(e.value))

            path.write_text("source,target,rating,timestamp\n1,2,five,100\n")
            with pytest.raises(DynastyDataError):
                read_edge_csv(path)


class CorrelationTestCase(TestCase):
    def test_window_count(self):
        series = np.random.default_rng(0).standard_normal((4, 30))
        corr, last = correlation_windows(series, 20, 1)
        self.assertEqual(corr.shape, (11, 4, 4))
        np.testing.assert_array_equal(last[0], series[:, 19])
        self.assertEqual(correlation_windows(series, 20, 3)[0].shape[0], 4)

    def test_oracle(self):
        window = np.random.default_rng(1).standard_normal((5, 12))
        corr = pearson_correlation(window)
        np.testing.assert_allclose(corr, np.corrcoef(window), atol=1e-12)
        np.testing.assert_array_equal(corr, corr.T)
        np.testing.assert_array_equal(np.diag(corr), 1.0)

    def test_degenerate_rows(self):
        window = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])
        corr = pearson_correlation(window)
        self.assertAlmostEqual(corr[0, 1], 1.0, places=12)
        self.assertEqual(corr[0, 2], 0.0)
        self.assertEqual(corr[2, 2], 1.0)

    def test_threshold(self):
        rng = np.random.default_rng(2)
        base = np.sin(np.linspace(0, 6, 20))
        anti = -base + 0.1 * rng.standard_normal(20)
        noise = rng.standard_normal(20)
        series = np.stack([base, anti, noise])
        self.assertLess(np.corrcoef(base, anti)[0, 1], -0.8)

        corr, _ = correlation_windows(series, 20, 1)
        # Two windows are needed for one (L=1, H=1) sample; the first window is `series` itself.
        graphs = window_correlation_graphs(np.concatenate([series, series], axis=1), 20, 1, 0.8, 1, 1)
        self.assertEqual(graphs[0].A_hist[0, 1, 0], 1.0)
        self.assertEqual(graphs[0].A_hist[1, 0, 0], 1.0)
        self.assertEqual(graphs[0].A_hist[0, 0, 0], 1.0)
        self.assertEqual(graphs[0].A_hist[0, 2, 0], float(abs(corr[0, 0, 2]) > 0.8))

    def test_samples(self):
        series = np.random.default_rng(3).standard_normal((3, 30))
        dataset = window_correlation_graphs(series, 5, 1, 0.5, 4, 2, subject_id="s1")

        self.assertEqual(len(dataset), 26 - 6 + 1)
        self.assertEqual(dataset.dims, (3, 1, 4, 2))
        self.assertEqual(dataset.sample_ids[0], "s1-00000")
        self.assertEqual(dataset[0].X_hist[1, 0, 0], series[1, 4])
        self.assertTrue(set(np.unique(dataset[0].A_hist)) <= {0.0, 1.0})

    def test_cohort(self):
        rng = np.random.default_rng(4)
        cohort = window_correlation_cohort(
            {"b": rng.standard_normal((3, 12)), "a": rng.standard_normal((3, 12))}, 5, 1, 0.5, 2, 1
        )
        self.assertEqual(cohort.provenance["stream"], "multi")
        self.assertEqual(cohort.provenance["subjects"], ["a", "b"])
        self.assertEqual(len(cohort), 12)
        self.assertEqual(cohort.sample_ids[0], "a-00000")
        self.assertEqual(cohort.sample_ids[6], "b-00000")

    def test_errors(self):
        series = np.zeros((3, 10))
        with pytest.raises(DynastyConfigError):
            correlation_windows(series, 1, 1)

        with pytest.raises(DynastyDataError):
            correlation_windows(series, 11, 1)

        with pytest.raises(DynastyConfigError):
            window_correlation_graphs(series, 5, 1, 1.5, 2, 1)

        with pytest.raises(DynastyDataError):
            window_correlation_graphs(series, 5, 1, 0.5, 4, 4)

    def test_series_bundle(self):
        with tempfile.TemporaryDirectory() as tmp:
            write_bundle(Path(tmp, "series"), {"s1": np.ones((3, 8))}, {})
            self.assertEqual(load_series(Path(tmp, "series"))["s1"].shape, (3, 8))

            write_bundle(Path(tmp, "bad"), {"s1": np.ones(8)}, {})
            with pytest.raises(DynastyDimensionError):
                load_series(Path(tmp, "bad"))


class StaticGraphTestCase(TestCase):
    def test_consensus(self):
        G = (np.random.default_rng(5).random((4, 4)) < 0.5).astype(float)
        np.testing.assert_array_equal(aggregate_static_consensus([np.stack([G] * 3, axis=-1)], 0.5), G)
        np.testing.assert_array_equal(aggregate_static_consensus([G, G], 0.99), G)

        slices = np.zeros((3, 3, 3))
        slices[0, 1, :2] = 1.0
        slices[1, 2, 0] = 1.0
        slices[2, 0, :] = 1.0
        consensus = aggregate_static_consensus([slices], 0.5)
        self.assertEqual(consensus[0, 1], 1.0)
        self.assertEqual(consensus[1, 2], 0.0)

        universal = aggregate_static_consensus([slices], 1.0)
        np.testing.assert_array_equal(universal, [[0, 0, 0], [0, 0, 0], [1, 0, 0]])

        with pytest.raises(DynastyConfigError):
            aggregate_static_consensus([slices], 1.5)

    def test_union(self):
        np.testing.assert_array_equal(aggregate_static_union([np.zeros((3, 3, 4))]), 0.0)

        one = np.zeros((3, 3, 4))
        one[2, 1, 3] = 0.5
        union = aggregate_static_union([one])
        self.assertEqual(union.sum(), 1.0)
        self.assertEqual(union[2, 1], 1.0)

        dataset = diffusion()
        union = aggregate_static_union(dataset)
        for i in range(5):
            for j in range(5):
                ever = any(s.A_hist[i, j, t] != 0 for s in dataset for t in range(4))
                self.assertEqual(union[i, j], float(ever))

    def test_union_records(self):
        records = [
            TemporalEdgeRecord("0", "1", 3, HOUR),
            TemporalEdgeRecord("1", "2", -2, 9 * HOUR),
            TemporalEdgeRecord("2", "2", 5, 9 * HOUR),
        ]
        np.testing.assert_array_equal(
            aggregate_static_union(records), [[0, 1, 0], [0, 0, 1], [0, 0, 0]]
        )

    def test_static_variant(self):
        dataset = diffusion()
        static = make_static_variant(dataset)
        consensus = aggregate_static_consensus(dataset)

        self.assertEqual(static.provenance["graph"], "static-consensus")
        for original, s in zip(dataset, static):
            for t in range(4):
                np.testing.assert_array_equal(s.A_hist[..., t], consensus)
            np.testing.assert_array_equal(s.X_hist, original.X_hist)


class ShuffleTestCase(TestCase):
    def test_shuffle(self):
        dataset = diffusion(num_samples=50)
        shuffled = shuffle_graphs(dataset, np.random.default_rng(0))

        moved = sum(not np.array_equal(a.A_hist, b.A_hist) for a, b in zip(dataset, shuffled))
        self.assertGreaterEqual(moved, 45)
        self.assertEqual(
            sorted(s.A_hist.tobytes() for s in dataset), sorted(s.A_hist.tobytes() for s in shuffled)
        )
        for a, b in zip(dataset, shuffled):
            np.testing.assert_array_equal(a.X_hist, b.X_hist)
            np.testing.assert_array_equal(a.Y, b.Y)
        self.assertFalse(shuffled.provenance["shuffle_identity_fallback"])

        again = shuffle_graphs(dataset, np.random.default_rng(0))
        for a, b in zip(shuffled, again):
            np.testing.assert_array_equal(a.A_hist, b.A_hist)

    def test_single_sample(self):
        shuffled = shuffle_graphs(diffusion(num_samples=1), np.random.default_rng(0))
        self.assertTrue(shuffled.provenance["shuffle_identity_fallback"])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 60), st.integers(0, 2**32 - 1))
    def test_derangement(self, count, seed):
        order = derangement(count, np.random.default_rng(seed))
        self.assertEqual(sorted(order.tolist()), list(range(count)))
        self.assertFalse(np.any(order == np.arange(count)))


class SplitTestCase(TestCase):
    def test_sizes(self):
        train, val, test = split_dataset(diffusion())
        self.assertEqual((len(train), len(val), len(test)), (7, 1, 2))
        ids = train.sample_ids + val.sample_ids + test.sample_ids
        self.assertEqual(sorted(ids), diffusion().sample_ids)
        self.assertEqual(train.provenance["split"]["policy"], "random")

        with pytest.raises(DynastyConfigError):
            split_dataset(diffusion(), (1.0, 0.0, 0.0))

        with pytest.raises(DynastyConfigError):
            split_dataset(diffusion(), (0.5, 0.5))

    def test_small_sizes(self):
        self.assertEqual(split_sizes(10, (0.7, 0.1, 0.2)), (7, 1, 2))
        self.assertEqual(split_sizes(5, (0.7, 0.1, 0.2)), (3, 1, 1))
        self.assertEqual(split_sizes(100, (0.71, 0.29, 0.0)), (71, 29, 0))

        train, val, test = split_dataset(diffusion(num_samples=5))
        self.assertEqual((len(train), len(val), len(test)), (3, 1, 1))

        with pytest.raises(DynastyConfigError):
            split_dataset(diffusion(num_samples=2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(3, 500), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
    def test_sizes_property(self, total, first, second):
        assume(first + second < 0.95)
        fractions = (first, second, 1.0 - first - second)
        sizes = split_sizes(total, fractions)
        self.assertEqual(sum(sizes), total)
        for size, fraction in zip(sizes, fractions):
            self.assertLessEqual(abs(size - total * fraction), 2.0)

    def test_seeded(self):
        first = split_dataset(diffusion(num_samples=30), seed=3)
        second = split_dataset(diffusion(num_samples=30), seed=3)
        other = split_dataset(diffusion(num_samples=30), seed=4)
        self.assertEqual(first[0].sample_ids, second[0].sample_ids)
        self.assertNotEqual(first[0].sample_ids, other[0].sample_ids)

    def test_chronological(self):
        dataset = ingest_edge_list(rating_stream(40), HOUR, 4, 2)
        train, val, test = split_dataset(dataset)

        self.assertEqual(train.provenance["split"]["policy"], "chronological")
        self.assertLess(max(train.sample_ids), min(val.sample_ids))
        self.assertLess(max(val.sample_ids), min(test.sample_ids))


class NormalizeTestCase(TestCase):
    def test_unit_values(self):
        samples = [toy_sample("a", [[[0.0]], [[2.0]]], [[[0.0]], [[2.0]]])]
        dataset = Dataset(samples)
        stats = fit_normalizer(dataset)

        np.testing.assert_array_equal(stats.mean, [1.0])
        np.testing.assert_array_equal(stats.std, [1.0])
        np.testing.assert_array_equal(normalize_dataset(dataset, stats)[0].X_hist[:, 0, 0], [-1.0, 1.0])

    def test_constant_dimension(self):
        dataset = diffusion()
        for s in dataset:
            s.X_hist[:, 1] = 3.0
            s.Y[:, 1] = 3.0
        stats = fit_normalizer(dataset)
        self.assertEqual(stats.degenerate, [1])
        self.assertEqual(stats.std[1], 1.0)

        normalized = normalize_dataset(dataset, stats)
        np.testing.assert_array_equal(normalized[0].X_hist[:, 1], 0.0)
        restored = denormalize_dataset(normalized)
        np.testing.assert_allclose(restored[0].X_hist, dataset[0].X_hist, atol=1e-12)
        np.testing.assert_array_equal(restored[0].A_hist, dataset[0].A_hist)

    def test_contracts(self):
        dataset = diffusion()
        stats = fit_normalizer(dataset)
        normalized = normalize_dataset(dataset, stats)

        with pytest.raises(DynastyContractError):
            normalize_dataset(normalized, stats)

        with pytest.raises(DynastyContractError):
            denormalize_dataset(dataset)

        with pytest.raises(DynastyConfigError):
            transform(stats, dataset[0].X_hist, "sideways")

        with pytest.raises(DynastyDimensionError):
            stats.apply(np.zeros((3, 5, 4)))

    def test_stats_dict(self):
        stats = NormStats([1.0, 2.0], [0.5, 3.0], [1])
        self.assertTrue(NormStats.from_dict(stats.to_dict()).matches(stats))

        with pytest.raises(DynastyDataError):
            NormStats.from_dict({"mean": [1.0]})

        with pytest.raises(DynastyConfigError):
            NormStats([0.0], [0.0])

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (3, 2, 4), elements=st.floats(-100, 100)),
        arrays(np.float64, 2, elements=st.floats(-10, 10)),
        arrays(np.float64, 2, elements=st.floats(0.1, 10)),
    )
    def test_round_trip(self, values, mean, std):
        stats = NormStats(mean, std)
        restored = transform(stats, transform(stats, values, "apply"), "invert")
        np.testing.assert_allclose(restored, values, rtol=0, atol=1e-11)


class StorageTestCase(TestCase):
    def test_round_trip(self):
        dataset = diffusion()
        normalized = normalize_dataset(dataset, fit_normalizer(dataset))
        with tempfile.TemporaryDirectory() as tmp:
            save_dataset(normalized, Path(tmp, "dataset"))
            loaded = load_dataset(Path(tmp, "dataset"))

            write_bundle(Path(tmp, "other"), {}, {"format": "something-else"})
            with pytest.raises(DynastyDataError):
                load_dataset(Path(tmp, "other"))

        self.assertEqual(loaded.sample_ids, normalized.sample_ids)
        self.assertEqual(loaded.provenance, normalized.provenance)
        self.assertTrue(loaded.norm_stats.matches(normalized.norm_stats))
        for a, b in zip(loaded, normalized):
            np.testing.assert_array_equal(a.X_hist, b.X_hist)
            np.testing.assert_array_equal(a.A_hist, b.A_hist)
            np.testing.assert_array_equal(a.Y, b.Y)
