"""
Dataset construction: synthetic generators, edge-list ingestion, sliding-window correlation
graphs, static aggregation, graph ablation variants, splitting, normalisation and storage.

Every recipe returns a `Dataset` of `DynamicGraphSample`s, each carrying its own adjacency
history. Feature tensors are laid out `[N, D, L]` / `[N, D, H]` and adjacency `[N, N, L]`.
"""
from __future__ import annotations
import csv
import math
import logging
import dataclasses
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union
import numpy as np
from .storage import read_bundle, write_bundle
from .exceptions import (
    DynastyConfigError,
    DynastyContractError,
    DynastyDataError,
    DynastyDimensionError,
)


logger = logging.getLogger(__name__)

DATASET_FORMAT = "dynasty-dataset"
EDGE_CSV_COLUMNS = ("source", "target", "rating", "timestamp")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclasses.dataclass
class DynamicGraphSample:
    """
    One example: node-feature history, per-step adjacency history and the target trajectory.

    Args:
        X_hist: Node features `[N, D, L]`.
        A_hist: Adjacency sequence `[N, N, L]`.
        Y: Future node features `[N, D, H]`.
        sample_id: Identifier, unique within a dataset.
    """

    X_hist: np.ndarray
    A_hist: np.ndarray
    Y: np.ndarray
    sample_id: str

    def __post_init__(self) -> None:
        self.X_hist = np.asarray(self.X_hist, dtype=np.float64)
        self.A_hist = np.asarray(self.A_hist, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.sample_id = str(self.sample_id)

        if self.X_hist.ndim != 3 or self.A_hist.ndim != 3 or self.Y.ndim != 3:
            raise DynastyDimensionError(
                f"Sample '{self.sample_id}' needs X_hist [N, D, L], A_hist [N, N, L] and Y [N, D, H]. "
                f"Received: {list(self.X_hist.shape)}, {list(self.A_hist.shape)}, {list(self.Y.shape)}"
            )
        N, D, L = self.X_hist.shape
        if self.A_hist.shape != (N, N, L):
            raise DynastyDimensionError(
                f"Sample '{self.sample_id}' has X_hist {list(self.X_hist.shape)} but A_hist {list(self.A_hist.shape)}."
            )
        if self.Y.shape[:2] != (N, D):
            raise DynastyDimensionError(
                f"Sample '{self.sample_id}' has X_hist {list(self.X_hist.shape)} but Y {list(self.Y.shape)}."
            )
        for name in ("X_hist", "A_hist", "Y"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DynastyDataError(f"Sample '{self.sample_id}' has non-finite values in {name}.")

    def replace(self, **changes: Any) -> DynamicGraphSample:
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass
class NormStats:
    """
    Per-feature-dimension z-score statistics, fitted on the training split.

    Args:
        mean: Mean per feature dimension, shape `[D]`.
        std: Standard deviation per feature dimension, shape `[D]`. Always positive.
        degenerate: Dimensions whose variance was zero (their `std` is forced to 1).
    """

    mean: np.ndarray
    std: np.ndarray
    degenerate: List[int] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise DynastyDimensionError(
                f"NormStats mean {list(self.mean.shape)} and std {list(self.std.shape)} differ in shape."
            )
        if not np.all(self.std > 0):
            raise DynastyConfigError("NormStats standard deviations must be positive.")

    def _column(self, values: np.ndarray, stat: np.ndarray) -> np.ndarray:
        if values.ndim < 2 or values.shape[-2] != stat.shape[0]:
            raise DynastyDimensionError(
                f"NormStats for D={stat.shape[0]} cannot transform a tensor of shape {list(values.shape)}."
            )
        return stat[:, None]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """
        Normalise a `[..., D, T]` feature tensor.
        """

        values = np.asarray(values, dtype=np.float64)
        return (values - self._column(values, self.mean)) / self._column(values, self.std)

    def invert(self, values: np.ndarray) -> np.ndarray:
        """
        Return a normalised `[..., D, T]` feature tensor to raw units.
        """

        values = np.asarray(values, dtype=np.float64)
        return values * self._column(values, self.std) + self._column(values, self.mean)

    def matches(self, other: Optional[NormStats]) -> bool:
        return (
            other is not None
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> NormStats:
        try:
            return cls(data["mean"], data["std"], list(data.get("degenerate", [])))
        except KeyError as e:
            raise DynastyDataError(f"NormStats is missing '{e.args[0]}'.") from e


def transform(stats: NormStats, values: np.ndarray, direction: str) -> np.ndarray:
    """
    Apply (`direction="apply"`) or invert (`direction="invert"`) a normalisation.
    """

    if direction == "apply":
        return stats.apply(values)
    if direction == "invert":
        return stats.invert(values)
    raise DynastyConfigError(
        f"Normalisation direction must be 'apply' or 'invert'. Received: '{direction}'"
    )


@dataclasses.dataclass
class Dataset:
    """
    Samples sharing `(N, D, L, H)`, with provenance describing how they were built.

    Args:
        samples: The samples, in stream or id order.
        provenance: Generator or ingestor name, its parameters and seed, plus split and variant notes.
        norm_stats: Statistics the feature tensors are normalised with, if any.
    """

    samples: List[DynamicGraphSample]
    provenance: Dict[str, Any] = dataclasses.field(default_factory=dict)
    norm_stats: Optional[NormStats] = None

    def __post_init__(self) -> None:
        self.samples = list(self.samples)
        if self.samples:
            dims = self._dims(self.samples[0])
            for sample in self.samples[1:]:
                if self._dims(sample) != dims:
                    raise DynastyDimensionError(
                        f"Sample '{sample.sample_id}' has (N, D, L, H) = {self._dims(sample)} but the dataset has {dims}."
                    )
            ids = [s.sample_id for s in self.samples]
            if len(set(ids)) != len(ids):
                raise DynastyDataError("Sample ids within a dataset must be unique.")

    @staticmethod
    def _dims(sample: DynamicGraphSample) -> Tuple[int, int, int, int]:
        N, D, L = sample.X_hist.shape
        return N, D, L, sample.Y.shape[2]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[DynamicGraphSample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> DynamicGraphSample:
        return self.samples[index]

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        if not self.samples:
            raise DynastyConfigError("The dataset is empty.")
        return self._dims(self.samples[0])

    @property
    def num_nodes(self) -> int:
        return self.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.dims[1]

    @property
    def history_len(self) -> int:
        return self.dims[2]

    @property
    def horizon(self) -> int:
        return self.dims[3]

    @property
    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    def arrays(self, indices: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Stack samples along a leading batch axis.

        Returns:
            `X [B, N, D, L]`, `A [B, N, N, L]` and `Y [B, N, D, H]`.
        """

        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        if not chosen:
            raise DynastyConfigError("Cannot stack an empty selection of samples.")
        return (
            np.stack([s.X_hist for s in chosen]),
            np.stack([s.A_hist for s in chosen]),
            np.stack([s.Y for s in chosen]),
        )

    def with_samples(self, samples: List[DynamicGraphSample], **provenance: Any) -> Dataset:
        return Dataset(samples, {**self.provenance, **provenance}, self.norm_stats)

    def subset(self, indices: Sequence[int], **provenance: Any) -> Dataset:
        return self.with_samples([self.samples[i] for i in indices], **provenance)


def _require_positive(**values: Any) -> None:
    for name, value in values.items():
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise DynastyConfigError(f"'{name}' must be a positive integer. Received: {value!r}")


def _window_samples(
    features: np.ndarray,
    adjacency: np.ndarray,
    history_len: int,
    horizon: int,
    prefix: str,
) -> List[DynamicGraphSample]:
    """
    Slide a window of `L + H` steps, stride 1, over one stream.

    Args:
        features: `[T, N, D]` per-step node features.
        adjacency: `[T, N, N]` per-step adjacency.
    """

    steps = features.shape[0]
    needed = history_len + horizon
    if steps < needed:
        raise DynastyDataError(
            f"Only {steps} intervals are available but L + H = {history_len} + {horizon} = {needed} are needed."
        )
    samples = []
    for start in range(steps - needed + 1):
        past = slice(start, start + history_len)
        future = slice(start + history_len, start + needed)
        samples.append(
            DynamicGraphSample(
                X_hist=np.transpose(features[past], (1, 2, 0)),
                A_hist=np.transpose(adjacency[past], (1, 2, 0)),
                Y=np.transpose(features[future], (1, 2, 0)),
                sample_id=f"{prefix}-{start:05d}",
            )
        )
    return samples


# Synthetic diffusion


def row_normalize(A: np.ndarray) -> np.ndarray:
    """
    Divide each row by its sum. Rows summing to zero stay zero.
    """

    degree = A.sum(axis=-1, keepdims=True)
    safe = np.where(degree == 0, 1.0, degree)
    return np.where(degree == 0, 0.0, A / safe)


def diffusion_step(x: np.ndarray, A: np.ndarray, beta: float) -> np.ndarray:
    """
    One noiseless step `(1 - beta) * x + beta * rownorm(A) @ x` for signals `x` of shape `[N, D]`.
    """

    return (1.0 - beta) * x + beta * (row_normalize(A) @ x)


def random_symmetric_graph(
    num_nodes: int, edge_prob: float, rng: np.random.Generator
) -> np.ndarray:
    upper = np.triu(rng.random((num_nodes, num_nodes)) < edge_prob, k=1)
    return (upper | upper.T).astype(np.float64)


def generate_diffusion_dataset(
    N: int,
    D: int,
    L: int,
    H: int,
    num_samples: int,
    graph_switch_prob: float,
    noise_std: float,
    seed: int,
    beta: float = 0.5,
    avg_degree: Optional[float] = None,
    constant_signals: bool = False,
) -> Dataset:
    """
    Generate samples whose future depends on their own evolving graph.

    Each sample draws a random sparse symmetric graph, redrawn at every step with probability
    `graph_switch_prob`. Node signals evolve as
    `x[t+1] = (1 - beta) * x[t] + beta * rownorm(A[t]) @ x[t] + noise`. The first `L` steps
    give `X_hist`/`A_hist`, the next `H` give `Y` while the graph keeps evolving (those
    future graphs are not stored).

    Args:
        N: Nodes.
        D: Feature dimensions.
        L: History length.
        H: Horizon.
        num_samples: Number of samples.
        graph_switch_prob: Per-step rewiring probability.
        noise_std: Standard deviation of the Gaussian innovation.
        seed: Base seed. Sample `i` uses its own stream derived from `(seed, i)`.
        beta: Coupling strength in `[0, 1]`.
        avg_degree: Expected node degree. Defaults to `min(3, N - 1)`.
        constant_signals: Start every node from a constant signal shared by all its dims.

    Returns:
        The generated dataset, with sample ids `diffusion-00000`, `diffusion-00001`, ...

    Raises:
        DynastyConfigError: If a size is not positive or the degree target is impossible.
    """

    _require_positive(N=N, D=D, L=L, H=H, num_samples=num_samples)
    if not 0.0 <= graph_switch_prob <= 1.0:
        raise DynastyConfigError(
            f"'graph_switch_prob' must lie in [0, 1]. Received: {graph_switch_prob!r}"
        )
    if not 0.0 <= beta <= 1.0:
        raise DynastyConfigError(f"'beta' must lie in [0, 1]. Received: {beta!r}")
    if noise_std < 0:
        raise DynastyConfigError(f"'noise_std' must be non-negative. Received: {noise_std!r}")
    if avg_degree is None:
        avg_degree = float(min(3, N - 1))
    if avg_degree < 0 or avg_degree > N - 1:
        raise DynastyConfigError(
            f"An average degree of {avg_degree} is impossible with N={N} nodes (maximum {N - 1})."
        )
    edge_prob = avg_degree / (N - 1) if N > 1 else 0.0

    samples = []
    for index in range(num_samples):
        rng = np.random.default_rng([seed, index])
        if constant_signals:
            x = np.repeat(rng.standard_normal((N, 1)), D, axis=1)
        else:
            x = rng.standard_normal((N, D))
        A = random_symmetric_graph(N, edge_prob, rng)

        frames, graphs = [], []
        for t in range(L + H):
            frames.append(x)
            graphs.append(A)
            x = diffusion_step(x, A, beta)
            if noise_std > 0:
                x = x + noise_std * rng.standard_normal((N, D))
            if rng.random() < graph_switch_prob:
                A = random_symmetric_graph(N, edge_prob, rng)

        features = np.stack(frames)
        samples.append(
            DynamicGraphSample(
                X_hist=np.transpose(features[:L], (1, 2, 0)),
                A_hist=np.transpose(np.stack(graphs[:L]), (1, 2, 0)),
                Y=np.transpose(features[L:], (1, 2, 0)),
                sample_id=f"diffusion-{index:05d}",
            )
        )

    provenance = {
        "source": "diffusion",
        "stream": "independent",
        "parameters": {
            "N": N,
            "D": D,
            "L": L,
            "H": H,
            "num_samples": num_samples,
            "graph_switch_prob": graph_switch_prob,
            "noise_std": noise_std,
            "beta": beta,
            "avg_degree": avg_degree,
            "constant_signals": constant_signals,
        },
        "seed": seed,
    }
    logger.debug("Generated %d diffusion samples (N=%d, L=%d, H=%d).", num_samples, N, L, H)
    return Dataset(samples, provenance)


# Temporal edge lists


@dataclasses.dataclass
class TemporalEdgeRecord:
    """
    One rating `source -> target` at `timestamp` (integer seconds).
    """

    source: str
    target: str
    rating: float
    timestamp: int

    def __post_init__(self) -> None:
        self.source = str(self.source)
        self.target = str(self.target)
        self.rating = float(self.rating)
        self.timestamp = int(self.timestamp)
        if self.timestamp < 0:
            raise DynastyDataError(
                f"Edge {self.source} -> {self.target} has a negative timestamp: {self.timestamp}"
            )
        if not math.isfinite(self.rating):
            raise DynastyDataError(f"Edge {self.source} -> {self.target} has a non-finite rating.")


def read_edge_csv(path: Union[str, Path]) -> List[TemporalEdgeRecord]:
    """
    Read a temporal edge list with header `source,target,rating,timestamp`.

    Raises:
        DynastyDataError: If columns are missing or a row cannot be parsed.
    """

    with open(path, newline="") as csv_file:
        reader = csv.DictReader(csv_file)
        missing = [c for c in EDGE_CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DynastyDataError(f"'{path}' is missing columns: {', '.join(missing)}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                records.append(
                    TemporalEdgeRecord(
                        source=row["source"].strip(),
                        target=row["target"].strip(),
                        rating=float(row["rating"]),
                        timestamp=int(row["timestamp"]),
                    )
                )
            except (TypeError, ValueError) as e:
                raise DynastyDataError(f"'{path}' line {line}: {e}") from e
    return records


def node_index(records: Sequence[TemporalEdgeRecord]) -> Dict[str, int]:
    """
    Map node ids onto `0..N-1`: numeric ids in numeric order, then the rest lexicographically.
    """

    def order(node: str) -> Tuple[int, Any]:
        try:
            return 0, int(node)
        except ValueError:
            return 1, node

    ids = sorted({r.source for r in records} | {r.target for r in records}, key=order)
    return {node: i for i, node in enumerate(ids)}


def bucket_edge_records(
    records: Sequence[TemporalEdgeRecord], interval_seconds: int
) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """
    Bucket ratings into fixed intervals counted from the earliest timestamp.

    Self-ratings are ignored.

    Returns:
        Node ids in index order, adjacency `[T, N, N]` holding the mean rating from `i` to `j`
        per interval (0 if none) and features `[T, N, 2]` holding the mean rating given and
        received per interval (0 without activity).
    """

    if not records:
        raise DynastyConfigError("Cannot ingest an empty edge list.")
    if not interval_seconds > 0:
        raise DynastyConfigError(
            f"'interval_seconds' must be positive. Received: {interval_seconds!r}"
        )
    index = node_index(records)
    start = min(r.timestamp for r in records)
    steps = (max(r.timestamp for r in records) - start) // interval_seconds + 1
    N = len(index)

    edge_sum = np.zeros((steps, N, N))
    edge_count = np.zeros((steps, N, N))
    given_sum, given_count = np.zeros((steps, N)), np.zeros((steps, N))
    received_sum, received_count = np.zeros((steps, N)), np.zeros((steps, N))

    for r in records:
        if r.source == r.target:
            continue
        t = (r.timestamp - start) // interval_seconds
        i, j = index[r.source], index[r.target]
        edge_sum[t, i, j] += r.rating
        edge_count[t, i, j] += 1
        given_sum[t, i] += r.rating
        given_count[t, i] += 1
        received_sum[t, j] += r.rating
        received_count[t, j] += 1

    def mean(total: np.ndarray, count: np.ndarray) -> np.ndarray:
        return np.divide(total, count, out=np.zeros_like(total), where=count > 0)

    adjacency = mean(edge_sum, edge_count)
    features = np.stack([mean(given_sum, given_count), mean(received_sum, received_count)], axis=-1)
    return list(index), adjacency, features


def ingest_edge_list(
    records: Sequence[TemporalEdgeRecord], interval_seconds: int, L: int, H: int
) -> Dataset:
    """
    Turn a temporal edge list into overlapping samples of one evolving rating network.

    Node features are `[mean rating given, mean rating received]` per interval (`D = 2`).

    Raises:
        DynastyConfigError: If the record list is empty or the interval is not positive.
        DynastyDataError: If fewer than `L + H` intervals are available.
    """

    _require_positive(L=L, H=H)
    node_ids, adjacency, features = bucket_edge_records(records, interval_seconds)
    samples = _window_samples(features, adjacency, L, H, prefix="window")
    provenance = {
        "source": "edge-list",
        "stream": "single",
        "parameters": {
            "interval_seconds": interval_seconds,
            "L": L,
            "H": H,
            "records": len(records),
            "intervals": int(adjacency.shape[0]),
        },
        "node_ids": node_ids,
        "seed": None,
    }
    logger.debug("Ingested %d records into %d samples.", len(records), len(samples))
    return Dataset(samples, provenance)


# Correlation windows


def pearson_correlation(window: np.ndarray) -> np.ndarray:
    """
    Pearson correlation between the rows of `window` (`[N, w]`).

    Zero-variance rows correlate 0 with every other row. The diagonal is 1 and the result is exactly symmetric.
    """

    window = np.asarray(window, dtype=np.float64)
    centred = window - window.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centred * centred, axis=1))
    denominator = np.outer(norms, norms)
    corr = np.divide(
        centred @ centred.T, denominator, out=np.zeros_like(denominator), where=denominator > 0
    )
    corr = np.clip(corr, -1.0, 1.0)
    corr = np.triu(corr, k=1)
    corr = corr + corr.T
    np.fill_diagonal(corr, 1.0)
    return corr


def correlation_windows(
    series: np.ndarray, window: int, stride: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Correlation matrices and last in-window values of each sliding window.

    Returns:
        Correlations `[T', N, N]` and features `[T', N]`, with `T' = (T - w) // s + 1`.
    """

    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise DynastyDimensionError(f"Series must have shape [N, T]. Received: {list(series.shape)}")
    if window < 2:
        raise DynastyConfigError(f"Correlation windows need at least 2 points. Received: {window!r}")
    _require_positive(stride=stride)
    if series.shape[1] < window:
        raise DynastyDataError(
            f"A series of length {series.shape[1]} is shorter than the window ({window})."
        )
    count = (series.shape[1] - window) // stride + 1
    corr, last = [], []
    for k in range(count):
        segment = series[:, k * stride : k * stride + window]
        corr.append(pearson_correlation(segment))
        last.append(segment[:, -1])
    return np.stack(corr), np.stack(last)


def _threshold(corr: np.ndarray, corr_threshold: float) -> np.ndarray:
    if not 0.0 <= corr_threshold <= 1.0:
        raise DynastyConfigError(
            f"'corr_threshold' must lie in [0, 1]. Received: {corr_threshold!r}"
        )
    return (np.abs(corr) > corr_threshold).astype(np.float64)


def _subject_samples(
    series: np.ndarray,
    window: int,
    stride: int,
    corr_threshold: float,
    L: int,
    H: int,
    subject_id: str,
) -> List[DynamicGraphSample]:
    corr, last = correlation_windows(series, window, stride)
    return _window_samples(
        last[:, :, None], _threshold(corr, corr_threshold), L, H, prefix=subject_id
    )


def window_correlation_graphs(
    series: np.ndarray,
    window: int,
    stride: int,
    corr_threshold: float,
    L: int,
    H: int,
    subject_id: str = "subject",
) -> Dataset:
    """
    Build thresholded correlation graphs over sliding windows of one subject's series.

    Each window yields `A = |corr| > corr_threshold` and the node feature is the series value
    at the window's last index (`D = 1`). Windows are then assembled into overlapping
    `(L, H)` samples.

    Raises:
        DynastyConfigError: If `window < 2` or the threshold lies outside `[0, 1]`.
        DynastyDataError: If the series is shorter than the window or yields fewer than `L + H` windows.
    """

    _require_positive(L=L, H=H)
    samples = _subject_samples(series, window, stride, corr_threshold, L, H, subject_id)
    provenance = {
        "source": "window-correlation",
        "stream": "single",
        "parameters": {
            "window": window,
            "stride": stride,
            "corr_threshold": corr_threshold,
            "L": L,
            "H": H,
        },
        "subjects": [subject_id],
        "seed": None,
    }
    return Dataset(samples, provenance)


def window_correlation_cohort(
    series: Mapping[str, np.ndarray],
    window: int,
    stride: int,
    corr_threshold: float,
    L: int,
    H: int,
) -> Dataset:
    """
    Combine several subjects' correlation streams into one dataset, one stream per subject.

    Subjects are taken in sorted id order; the result is split by sample id.
    """

    if not series:
        raise DynastyConfigError("A cohort needs at least one subject.")
    _require_positive(L=L, H=H)
    samples = []
    for subject_id in sorted(series):
        samples.extend(
            _subject_samples(series[subject_id], window, stride, corr_threshold, L, H, subject_id)
        )
    provenance = {
        "source": "window-correlation",
        "stream": "multi",
        "parameters": {
            "window": window,
            "stride": stride,
            "corr_threshold": corr_threshold,
            "L": L,
            "H": H,
        },
        "subjects": sorted(series),
        "seed": None,
    }
    return Dataset(samples, provenance)


# Static aggregation and graph ablations


AdjacencySource = Union[Dataset, Sequence[np.ndarray]]


def _adjacency_sequences(source: AdjacencySource) -> List[np.ndarray]:
    if isinstance(source, Dataset):
        sequences = [s.A_hist for s in source]
    else:
        sequences = [np.asarray(a, dtype=np.float64) for a in source]
    if not sequences:
        raise DynastyConfigError("Static aggregation needs at least one adjacency sequence.")
    sequences = [a[:, :, None] if a.ndim == 2 else a for a in sequences]
    N = sequences[0].shape[0]
    for a in sequences:
        if a.ndim != 3 or a.shape[:2] != (N, N):
            raise DynastyDimensionError(
                f"Adjacency sequences must share shape [{N}, {N}, L]. Received: {list(a.shape)}"
            )
    return sequences


def aggregate_static_consensus(source: AdjacencySource, tau: float = 0.5) -> np.ndarray:
    """
    Keep the edges present in more than a `tau` fraction of all slices of all sequences.

    Edges present in every slice are always kept, so `tau = 1` yields exactly the universal edges.

    Args:
        source: A dataset, or adjacency sequences `[N, N, L]` (or single `[N, N]` matrices).
        tau: Co-occurrence threshold in `[0, 1]`.

    Returns:
        Binary adjacency `[N, N]`.
    """

    if not 0.0 <= tau <= 1.0:
        raise DynastyConfigError(f"'tau' must lie in [0, 1]. Received: {tau!r}")
    sequences = _adjacency_sequences(source)
    present = sum(np.sum(a != 0, axis=2) for a in sequences)
    slices = sum(a.shape[2] for a in sequences)
    frequency = present / slices
    return ((frequency > tau) | (present == slices)).astype(np.float64)


def aggregate_static_union(
    source: Union[AdjacencySource, Sequence[TemporalEdgeRecord]]
) -> np.ndarray:
    """
    Binary union over time: an edge is kept if it is ever nonzero (or ever rated).

    Records map onto nodes as in `ingest_edge_list`; self-ratings are ignored.
    """

    if not isinstance(source, Dataset) and len(source) and isinstance(source[0], TemporalEdgeRecord):
        index = node_index(source)  # type: ignore
        union = np.zeros((len(index), len(index)))
        for r in source:
            if r.source != r.target:  # type: ignore
                union[index[r.source], index[r.target]] = 1.0  # type: ignore
        return union
    sequences = _adjacency_sequences(source)  # type: ignore
    union = np.zeros(sequences[0].shape[:2], dtype=bool)
    for a in sequences:
        union |= np.any(a != 0, axis=2)
    return union.astype(np.float64)


def repeat_static_graph(dataset: Dataset, A_static: np.ndarray, **provenance: Any) -> Dataset:
    """
    Replace every sample's adjacency history with one static graph repeated over its `L` steps.
    """

    A_static = np.asarray(A_static, dtype=np.float64)
    N, L = dataset.num_nodes, dataset.history_len
    if A_static.shape != (N, N):
        raise DynastyDimensionError(
            f"A static graph of shape {list(A_static.shape)} does not fit N={N} nodes."
        )
    repeated = np.repeat(A_static[:, :, None], L, axis=2)
    samples = [s.replace(A_hist=repeated.copy()) for s in dataset]
    return dataset.with_samples(samples, graph=provenance.pop("graph", "static"), **provenance)


def make_static_variant(
    dataset: Dataset, A_static: Optional[np.ndarray] = None, tau: float = 0.5
) -> Dataset:
    """
    Static-graph variant: every sample gets the consensus graph repeated `L` times.

    Args:
        dataset: Source dataset.
        A_static: Graph to repeat. Defaults to the consensus (`tau`) of this dataset's own graphs.
        tau: Consensus threshold used when `A_static` is omitted.
    """

    if not len(dataset):
        raise DynastyConfigError("Cannot build a static variant of an empty dataset.")
    if A_static is None:
        A_static = aggregate_static_consensus(dataset, tau)
    return repeat_static_graph(dataset, A_static, graph="static-consensus", consensus_tau=tau)


def derangement(count: int, rng: np.random.Generator) -> np.ndarray:
    """
    Random cyclic permutation of `range(count)`, which moves every element when `count >= 2`.
    """

    order = np.arange(count)
    for i in range(count - 1, 0, -1):
        j = int(rng.integers(0, i))
        order[i], order[j] = order[j], order[i]
    return order


def shuffle_graphs(dataset: Dataset, rng: np.random.Generator) -> Dataset:
    """
    Reassign adjacency histories across samples so graphs no longer match their features.

    Features and targets are untouched. With one sample no derangement exists; the dataset is
    returned unchanged with `provenance["shuffle_identity_fallback"]` set.
    """

    if not len(dataset):
        raise DynastyConfigError("Cannot shuffle graphs of an empty dataset.")
    if len(dataset) == 1:
        logger.warning("A single-sample dataset cannot be deranged; graphs are left in place.")
        return dataset.with_samples(list(dataset.samples), graph="shuffled", shuffle_identity_fallback=True)
    order = derangement(len(dataset), rng)
    samples = [s.replace(A_hist=dataset[int(k)].A_hist) for s, k in zip(dataset, order)]
    return dataset.with_samples(samples, graph="shuffled", shuffle_identity_fallback=False)


# Splitting and normalisation


def split_sizes(total: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    """
    Part sizes for `total` samples: floors of `total * fraction`, the leftover samples to the
    largest remainders (earlier parts win ties), then one sample moved from the largest part to
    any empty part whose fraction is non-zero.

    ```python
    split_sizes(10, (0.7, 0.1, 0.2))  # (7, 1, 2)
    split_sizes(5, (0.7, 0.1, 0.2))  # (3, 1, 1)
    ```
    """

    exact = [total * f for f in fractions]
    # The epsilon keeps products like 100 * 0.29 from flooring one short.
    sizes = [int(math.floor(x + 1e-9)) for x in exact]
    remainders = [x - size for x, size in zip(exact, sizes)]
    for i in sorted(range(len(sizes)), key=lambda i: -remainders[i])[: total - sum(sizes)]:
        sizes[i] += 1
    for i, fraction in enumerate(fractions):
        donor = max(range(len(sizes)), key=lambda j: sizes[j])
        if fraction > 0 and sizes[i] == 0 and sizes[donor] > 1:
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes[0], sizes[1], sizes[2]


def split_dataset(
    dataset: Dataset,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Split into train, validation and test.

    Samples from one overlapping-window stream are split chronologically (contiguous blocks),
    anything else randomly by sample id. The policy is recorded in each part's provenance.

    Args:
        dataset: Dataset to split.
        fractions: Train, validation and test fractions summing to 1.
        seed: Seed of the random policy.

    Raises:
        DynastyConfigError: If the fractions are invalid or any part would be empty.
    """

    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DynastyConfigError(
            f"Split fractions must be three non-negative numbers summing to 1. Received: {list(fractions)}"
        )
    total = len(dataset)
    sizes = split_sizes(total, fractions)
    if min(sizes) < 1:
        raise DynastyConfigError(
            f"Splitting {total} samples by {list(fractions)} gives sizes {list(sizes)}; every split must be non-empty."
        )

    if dataset.provenance.get("stream") == "single":
        policy = "chronological"
        order = list(range(total))
    else:
        policy = "random"
        by_id = sorted(range(total), key=lambda i: dataset[i].sample_id)
        order = [by_id[i] for i in np.random.default_rng(seed).permutation(total)]

    bounds = np.cumsum((0,) + sizes)
    parts = []
    for name, lo, hi in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
        indices = sorted(order[lo:hi])
        split = {"part": name, "policy": policy, "fractions": list(fractions), "seed": seed}
        parts.append(dataset.subset(indices, split=split))
    return parts[0], parts[1], parts[2]


def fit_normalizer(train: Dataset) -> NormStats:
    """
    Fit per-dimension z-score statistics on the training split's X and Y values.

    Zero-variance dimensions get `std = 1` and are listed in `degenerate`, with a warning.
    """

    if not len(train):
        raise DynastyConfigError("Cannot fit a normaliser on an empty split.")
    D = train.feature_dim
    values = [
        np.concatenate(
            [s.X_hist[:, d, :].reshape(-1) for s in train] + [s.Y[:, d, :].reshape(-1) for s in train]
        )
        for d in range(D)
    ]
    mean = np.array([v.mean() for v in values])
    std = np.array([v.std() for v in values])
    degenerate = [d for d in range(D) if not std[d] > 0]
    for d in degenerate:
        logger.warning("Feature dimension %d has zero variance; its std is set to 1.", d)
        std[d] = 1.0
    return NormStats(mean, std, degenerate)


def normalize_dataset(dataset: Dataset, stats: NormStats) -> Dataset:
    """
    Normalise features and targets. Adjacency is never normalised.
    """

    if dataset.norm_stats is not None:
        raise DynastyContractError("The dataset is already normalised.")
    samples = [s.replace(X_hist=stats.apply(s.X_hist), Y=stats.apply(s.Y)) for s in dataset]
    return Dataset(samples, dict(dataset.provenance), stats)


def denormalize_dataset(dataset: Dataset) -> Dataset:
    if dataset.norm_stats is None:
        raise DynastyContractError("The dataset is not normalised.")
    stats = dataset.norm_stats
    samples = [s.replace(X_hist=stats.invert(s.X_hist), Y=stats.invert(s.Y)) for s in dataset]
    return Dataset(samples, dict(dataset.provenance), None)


# Storage


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """
    Write a dataset bundle: `manifest.json` (ids, provenance, stats, shapes) and `data.bin`.
    """

    arrays: Dict[str, np.ndarray] = {}
    for s in dataset:
        arrays[f"{s.sample_id}/X_hist"] = s.X_hist
        arrays[f"{s.sample_id}/A_hist"] = s.A_hist
        arrays[f"{s.sample_id}/Y"] = s.Y
    meta = {
        "format": DATASET_FORMAT,
        "sample_ids": dataset.sample_ids,
        "provenance": dataset.provenance,
        "norm_stats": None if dataset.norm_stats is None else dataset.norm_stats.to_dict(),
    }
    return write_bundle(directory, arrays, meta)


def load_dataset(directory: Union[str, Path]) -> Dataset:
    """
    Read a dataset written by `save_dataset`. Values round-trip bit-exactly.
    """

    arrays, meta = read_bundle(directory)
    if meta.get("format") != DATASET_FORMAT:
        raise DynastyDataError(f"'{directory}' is not a dataset.")
    try:
        samples = [
            DynamicGraphSample(
                arrays[f"{i}/X_hist"], arrays[f"{i}/A_hist"], arrays[f"{i}/Y"], sample_id=i
            )
            for i in meta["sample_ids"]
        ]
    except KeyError as e:
        raise DynastyDataError(f"'{directory}' is missing tensor {e}.") from e
    stats = meta.get("norm_stats")
    return Dataset(
        samples, meta.get("provenance", {}), None if stats is None else NormStats.from_dict(stats)
    )


def load_series(directory: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Read raw `[N, T]` series, one tensor per subject, from a bundle.
    """

    arrays, _ = read_bundle(directory)
    for name, values in arrays.items():
        if values.ndim != 2:
            raise DynastyDimensionError(
                f"Series '{name}' must have shape [N, T]. Received: {list(values.shape)}"
            )
    return arrays
