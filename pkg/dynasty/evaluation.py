"""
Metrics, model evaluation, the graph-blind baseline, ablations and sensitivity sweeps.
"""
from __future__ import annotations
import csv
import json
import time
import logging
import statistics
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union
import numpy as np
from .config import ModelConfig, TrainConfig, worker_count
from .data import (
    Dataset,
    NormStats,
    aggregate_static_consensus,
    random_symmetric_graph,
    repeat_static_graph,
    shuffle_graphs,
)
from .model import DynastyModel, ForecasterBase, RecurrentBaseline, encode, init_parameters
from .storage import json_dump_pretty
from .training import run_pretraining, run_training, predict_dataset
from .exceptions import DynastyConfigError, DynastyContractError, DynastyDimensionError


logger = logging.getLogger(__name__)

ABLATION_TOGGLES = (
    "full",
    "no_edge_bias",
    "no_pretraining",
    "no_variation_loss",
    "static_graph",
    "shuffled_graph",
    "temporal_attention_on",
)
SWEEP_PARAMETERS = ("num_heads", "hidden_dim", "num_layers")
SWEEP_COLUMNS = (
    "parameter",
    "value",
    "seed",
    "rmse",
    "mae",
    "train_seconds_per_epoch",
    "inference_seconds",
)
SHUFFLE_STREAM = 3

Splits = Tuple[Dataset, Dataset, Dataset]


@dataclasses.dataclass
class Metrics:
    mae: float
    rmse: float
    mae_per_step: List[float]
    rmse_per_step: List[float]


def compute_metrics(Y_pred: np.ndarray, Y_true: np.ndarray) -> Metrics:
    """
    MAE and RMSE overall and per horizon step (the last axis).

    Args:
        Y_pred: Predictions `[N, D, H]` or `[S, N, D, H]`, in raw units.
        Y_true: Targets of the same shape.

    Raises:
        DynastyDimensionError: If the shapes differ.
    """

    Y_pred = np.asarray(Y_pred, dtype=np.float64)
    Y_true = np.asarray(Y_true, dtype=np.float64)
    if Y_pred.shape != Y_true.shape or Y_pred.ndim < 1:
        raise DynastyDimensionError(
            f"Operation 'compute_metrics' cannot compare shapes {list(Y_pred.shape)} and {list(Y_true.shape)}."
        )
    error = (Y_pred - Y_true).reshape(-1, Y_pred.shape[-1])
    mae_steps = np.mean(np.abs(error), axis=0)
    rmse_steps = np.sqrt(np.mean(error * error, axis=0))
    mae = float(np.mean(np.abs(error)))
    rmse = float(np.sqrt(np.mean(error * error)))
    # Equal-magnitude errors can round an ulp apart.
    return Metrics(
        mae=mae,
        rmse=max(rmse, mae),
        mae_per_step=mae_steps.tolist(),
        rmse_per_step=np.maximum(rmse_steps, mae_steps).tolist(),
    )


@dataclasses.dataclass
class EvalReport:
    """
    Denormalised forecast errors of one model on one dataset.

    `wall_seconds` (inference time) is kept out of `to_dict`, so reports of the same
    model and data serialise identically.
    """

    mae: float
    rmse: float
    mae_per_step: List[float]
    rmse_per_step: List[float]
    sample_count: int
    provenance: Dict[str, Any] = dataclasses.field(default_factory=dict)
    wall_seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "mae_per_step": self.mae_per_step,
            "rmse_per_step": self.rmse_per_step,
            "sample_count": self.sample_count,
            "provenance": self.provenance,
        }

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json_dump_pretty(self.to_dict()) + "\n")


def evaluate_model(
    model: ForecasterBase, dataset: Dataset, norm_stats: Optional[NormStats]
) -> EvalReport:
    """
    Free-running, dropout-free forecasts on every sample, scored in raw units.

    Args:
        model: Model to evaluate.
        dataset: Dataset normalised with `norm_stats`.
        norm_stats: Statistics used to denormalise predictions and targets.

    Raises:
        DynastyContractError: If `norm_stats` is missing, disagrees with the dataset's, or the node count differs from the model's.
    """

    if norm_stats is None:
        raise DynastyContractError("Evaluation needs the normalisation statistics of the dataset.")
    if dataset.norm_stats is not None and not norm_stats.matches(dataset.norm_stats):
        raise DynastyContractError(
            "The dataset was normalised with different statistics than those supplied."
        )
    start = time.perf_counter()
    prediction = predict_dataset(model, dataset)
    wall_seconds = time.perf_counter() - start
    _, _, Y = dataset.arrays()
    metrics = compute_metrics(norm_stats.invert(prediction), norm_stats.invert(Y))
    return EvalReport(
        mae=metrics.mae,
        rmse=metrics.rmse,
        mae_per_step=metrics.mae_per_step,
        rmse_per_step=metrics.rmse_per_step,
        sample_count=len(dataset),
        provenance={
            "model_kind": model.kind,
            "model_config": model.config.to_dict(),
            "dataset": dataset.provenance,
        },
        wall_seconds=wall_seconds,
    )


def baseline_forecast(
    splits: Splits, model_config: ModelConfig, cfg: TrainConfig
) -> Tuple[RecurrentBaseline, EvalReport]:
    """
    Train the per-node recurrent baseline with the fine-tuning loop and evaluate it on the test split.
    """

    train, val, test = splits
    model = RecurrentBaseline(model_config)
    model, _ = run_training(model, train, val, cfg)
    return model, evaluate_model(model, test, test.norm_stats)  # type: ignore


# Ablations


@dataclasses.dataclass
class AblationSpec:
    """
    Configurations and seeds of an ablation run.

    Args:
        toggles: Configurations to train, from `ABLATION_TOGGLES`.
        seeds: Seeds; each seeds both initialisation and training.
        model: Model settings shared by every configuration.
        train: Training settings shared by every configuration.
        consensus_tau: Threshold of the consensus graph used by `static_graph`.
    """

    toggles: List[str] = dataclasses.field(default_factory=lambda: list(ABLATION_TOGGLES))
    seeds: List[int] = dataclasses.field(default_factory=lambda: [0, 1, 2])
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    consensus_tau: float = 0.5

    def __post_init__(self) -> None:
        unknown = [t for t in self.toggles if t not in ABLATION_TOGGLES]
        if unknown:
            raise DynastyConfigError(
                f"Unknown ablation toggle(s): {', '.join(unknown)}. Expected one of: {', '.join(ABLATION_TOGGLES)}"
            )
        if not self.toggles:
            raise DynastyConfigError("An ablation needs at least one toggle.")
        if len(set(self.toggles)) != len(self.toggles):
            raise DynastyConfigError("Ablation toggles must be unique.")
        if not self.seeds:
            raise DynastyConfigError("An ablation needs at least one seed.")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> AblationSpec:
        known = {"toggles", "seeds", "model", "train", "consensus_tau"}
        for key in data:
            if key not in known:
                raise DynastyConfigError(
                    f"Unknown AblationSpec field '{key}'. Expected one of: {', '.join(sorted(known))}"
                )
        values = dict(data)
        if "model" in values:
            values["model"] = ModelConfig.from_dict(values["model"])
        if "train" in values:
            values["train"] = TrainConfig.from_dict(values["train"])
        return cls(**values)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> AblationSpec:
        with open(path) as spec_file:
            try:
                data = json.load(spec_file)
            except json.decoder.JSONDecodeError as e:
                raise DynastyConfigError(f"Could not parse '{path}': {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "toggles": list(self.toggles),
            "seeds": list(self.seeds),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "consensus_tau": self.consensus_tau,
        }


@dataclasses.dataclass
class CellResult:
    config: str
    seed: int
    report: EvalReport
    seconds: float

    def row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "config": self.config,
            "seed": self.seed,
            "mae": self.report.mae,
            "rmse": self.report.rmse,
        }
        for k, value in enumerate(self.report.mae_per_step, start=1):
            row[f"mae_step_{k}"] = value
        for k, value in enumerate(self.report.rmse_per_step, start=1):
            row[f"rmse_step_{k}"] = value
        row["seconds"] = self.seconds
        return row


@dataclasses.dataclass
class AblationSummary:
    config: str
    rmse_mean: float
    rmse_std: float
    mae_mean: float
    mae_std: float
    worse_than_full: Optional[int]
    seeds: int


@dataclasses.dataclass
class AblationTable:
    cells: List[CellResult]
    summary: List[AblationSummary]

    def summary_for(self, config: str) -> AblationSummary:
        for row in self.summary:
            if row.config == config:
                return row
        raise DynastyConfigError(f"No ablation row named '{config}'.")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "summary": [dataclasses.asdict(row) for row in self.summary],
            "cells": [cell.row() for cell in self.cells],
        }

    def write(self, directory: Union[str, Path], stem: str = "ablation") -> List[Path]:
        """
        Write `<stem>.json`, `<stem>.csv` (one row per cell) and `<stem>_summary.csv`.
        """

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / f"{stem}.json"
        json_path.write_text(json_dump_pretty(self.to_dict()) + "\n")

        rows = [cell.row() for cell in self.cells]
        cells_path = directory / f"{stem}.csv"
        with open(cells_path, "w", newline="") as csv_file:
            writer = csv.DictWriter(csv_file, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

        summary_path = directory / f"{stem}_summary.csv"
        with open(summary_path, "w", newline="") as csv_file:
            fields = [f.name for f in dataclasses.fields(AblationSummary)]
            writer = csv.DictWriter(csv_file, fieldnames=fields)
            writer.writeheader()
            writer.writerows(dataclasses.asdict(row) for row in self.summary)
        return [json_path, cells_path, summary_path]


def ablation_splits(toggle: str, seed: int, splits: Splits, consensus_tau: float = 0.5) -> Splits:
    """
    Apply a toggle's data variant.

    `static_graph` repeats the training split's consensus graph in every split. `shuffled_graph`
    deranges graphs within the training and validation splits, leaving the test split's
    true graphs in place.
    """

    train, val, test = splits
    if toggle == "static_graph":
        A_static = aggregate_static_consensus(train, consensus_tau)
        return tuple(  # type: ignore
            repeat_static_graph(part, A_static, graph="static-consensus", consensus_tau=consensus_tau)
            for part in splits
        )
    if toggle == "shuffled_graph":
        rng = np.random.default_rng([seed, SHUFFLE_STREAM])
        return shuffle_graphs(train, rng), shuffle_graphs(val, rng), test
    return splits


def train_dynasty(
    model_config: ModelConfig,
    cfg: TrainConfig,
    splits: Splits,
    pretrain: bool = True,
    disable_edge_bias: bool = False,
) -> Tuple[DynastyModel, Any, float]:
    """
    Pretrain (optionally) and fine-tune a fresh model.

    Returns:
        The model, its `TrainHistory` and the pretraining wall time.
    """

    train, val, _ = splits
    model = DynastyModel(model_config)
    if disable_edge_bias:
        model.disable_edge_bias()
    pretrain_seconds = 0.0
    if pretrain and cfg.pretrain_epochs > 0:
        model, pretrain_history = run_pretraining(model, train, cfg)
        pretrain_seconds = pretrain_history.total_seconds
    model, history = run_training(model, train, val, cfg, pretrain_seconds=pretrain_seconds)
    return model, history, pretrain_seconds


def run_ablation_cell(toggle: str, seed: int, spec: AblationSpec, splits: Splits) -> CellResult:
    start = time.perf_counter()
    model_config = spec.model.replace(
        init_seed=seed, temporal_attention=spec.model.temporal_attention or toggle == "temporal_attention_on"
    )
    cfg = spec.train.replace(seed=seed)
    if toggle == "no_variation_loss":
        cfg = cfg.replace(lambda_var=0.0)
    cell_splits = ablation_splits(toggle, seed, splits, spec.consensus_tau)

    model, _, _ = train_dynasty(
        model_config,
        cfg,
        cell_splits,
        pretrain=toggle != "no_pretraining",
        disable_edge_bias=toggle == "no_edge_bias",
    )
    test = cell_splits[2]
    report = evaluate_model(model, test, test.norm_stats)
    logger.info("Ablation %s (seed %d): RMSE %.6f, MAE %.6f", toggle, seed, report.rmse, report.mae)
    return CellResult(toggle, seed, report, time.perf_counter() - start)


JobResult = TypeVar("JobResult")


def fan_out(jobs: Sequence[Callable[[], JobResult]]) -> List[JobResult]:
    """
    Run independent jobs on up to `DYNASTY_THREADS` workers, returning results in job order.
    """

    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(job) for job in jobs]
        return [future.result() for future in futures]


def _summarise(cells: List[CellResult], toggles: List[str]) -> List[AblationSummary]:
    full = {c.seed: c.report.rmse for c in cells if c.config == "full"}
    summary = []
    for toggle in toggles:
        mine = [c for c in cells if c.config == toggle]
        rmse = [c.report.rmse for c in mine]
        mae = [c.report.mae for c in mine]
        worse = None
        if full:
            worse = sum(1 for c in mine if c.seed in full and c.report.rmse > full[c.seed])
        summary.append(
            AblationSummary(
                config=toggle,
                rmse_mean=float(np.mean(rmse)),
                rmse_std=float(np.std(rmse)),
                mae_mean=float(np.mean(mae)),
                mae_std=float(np.std(mae)),
                worse_than_full=worse,
                seeds=len(mine),
            )
        )
    return summary


def run_ablation_suite(spec: AblationSpec, splits: Splits) -> AblationTable:
    """
    Train and test every toggle for every seed, then summarise mean and std per toggle.

    `no_edge_bias` zeroes and freezes the edge-bias output layers, `no_pretraining` skips
    pretraining, `no_variation_loss` sets `lambda_var = 0`, `static_graph` and
    `shuffled_graph` swap in the data variants of `ablation_splits`, and
    `temporal_attention_on` enables temporal self-attention. The summary also counts, per
    toggle, the seeds on which it did worse than `full`.

    Args:
        spec: Toggles, seeds and shared settings.
        splits: Normalised train, validation and test splits.

    Returns:
        Per-cell results in (toggle, seed) order and one summary row per toggle.
    """

    for part in splits:
        if part.norm_stats is None:
            raise DynastyContractError("Ablation splits must be normalised first.")
    jobs = [
        (lambda toggle=toggle, seed=seed: run_ablation_cell(toggle, seed, spec, splits))
        for toggle in spec.toggles
        for seed in spec.seeds
    ]
    cells = fan_out(jobs)
    return AblationTable(cells, _summarise(cells, spec.toggles))


# Sensitivity and runtime


@dataclasses.dataclass
class SweepRow:
    parameter: str
    value: int
    seed: int
    rmse: float
    mae: float
    train_seconds_per_epoch: float
    inference_seconds: float


def run_sensitivity_sweep(
    parameter: str,
    values: Sequence[int],
    splits: Splits,
    model_config: ModelConfig,
    cfg: TrainConfig,
    seeds: Sequence[int] = (0,),
) -> List[SweepRow]:
    """
    Vary one architecture setting, keeping the rest fixed, and record test error and runtime.

    Args:
        parameter: One of `num_heads`, `hidden_dim` or `num_layers`.
        values: Values to try.
        splits: Normalised train, validation and test splits.
        model_config: Base model settings.
        cfg: Training settings.
        seeds: Seeds per value.

    Returns:
        One row per (value, seed), in that order.
    """

    if parameter not in SWEEP_PARAMETERS:
        raise DynastyConfigError(
            f"Cannot sweep '{parameter}'. Expected one of: {', '.join(SWEEP_PARAMETERS)}"
        )
    if not values or not seeds:
        raise DynastyConfigError("A sweep needs at least one value and one seed.")
    configs = [model_config.replace(**{parameter: value}) for value in values]

    def job(config: ModelConfig, value: int, seed: int) -> SweepRow:
        model, history, _ = train_dynasty(
            config.replace(init_seed=seed), cfg.replace(seed=seed), splits
        )
        test = splits[2]
        report = evaluate_model(model, test, test.norm_stats)
        return SweepRow(
            parameter=parameter,
            value=int(value),
            seed=int(seed),
            rmse=report.rmse,
            mae=report.mae,
            train_seconds_per_epoch=history.seconds_per_epoch(),
            inference_seconds=report.wall_seconds,
        )

    jobs = [
        (lambda config=config, value=value, seed=seed: job(config, value, seed))
        for config, value in zip(configs, values)
        for seed in seeds
    ]
    return fan_out(jobs)


def write_sweep(rows: List[SweepRow], directory: Union[str, Path], stem: str = "sweep") -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    with open(csv_path, "w", newline="") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=list(SWEEP_COLUMNS))
        writer.writeheader()
        writer.writerows(dataclasses.asdict(row) for row in rows)
    json_path = directory / f"{stem}.json"
    json_path.write_text(json_dump_pretty([dataclasses.asdict(row) for row in rows]) + "\n")
    return [csv_path, json_path]


def time_encoder(
    model_config: ModelConfig,
    num_nodes: int,
    repeats: int = 5,
    batch_size: int = 1,
    seed: int = 0,
) -> float:
    """
    Median wall time of an evaluation-mode encoder pass on random inputs with `num_nodes` nodes.
    """

    if repeats < 1:
        raise DynastyConfigError(f"'repeats' must be positive. Received: {repeats!r}")
    rng = np.random.default_rng(seed)
    params = init_parameters(model_config, rng)
    L, D = model_config.history_len, model_config.feature_dim
    X = rng.standard_normal((batch_size, num_nodes, D, L))
    A = np.stack(
        [
            np.stack([random_symmetric_graph(num_nodes, 0.2, rng) for _ in range(L)], axis=-1)
            for _ in range(batch_size)
        ]
    )
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        encode(X, A, params, model_config)
        timings.append(time.perf_counter() - start)
    return statistics.median(timings)
