"""
Resumable stages turning a pipeline config into a dataset, statistics, checkpoints and a report.

A run directory collects the stage outputs:

```
run/
    dataset/            raw dataset bundle
    stats.json          normalisation statistics of the training split
    pretrain.ckpt/      pretrained checkpoint
    pretrain_history.csv
    model.ckpt/         fine-tuned checkpoint
    history.csv
    report.json         test-split evaluation (no wall times)
    run.manifest.json   RunManifest of the command
```

A stage whose outputs already exist is loaded instead of recomputed.
"""
from __future__ import annotations
import json
import time
import logging
import dataclasses
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
from .config import JSONConfig, ModelConfig, TrainConfig
from .data import (
    DEFAULT_FRACTIONS,
    Dataset,
    NormStats,
    fit_normalizer,
    generate_diffusion_dataset,
    ingest_edge_list,
    load_dataset,
    load_series,
    normalize_dataset,
    read_edge_csv,
    save_dataset,
    split_dataset,
    window_correlation_cohort,
    window_correlation_graphs,
)
from .model import DynastyModel, ForecasterBase, load_checkpoint, save_checkpoint
from .training import TrainHistory, run_pretraining, run_training
from .evaluation import EvalReport, evaluate_model
from .storage import content_hash, json_dump_pretty
from .exceptions import DynastyConfigError, DynastyDataError


logger = logging.getLogger(__name__)

DATASET_DIR = "dataset"
STATS_FILE = "stats.json"
PRETRAIN_CKPT = "pretrain.ckpt"
PRETRAIN_HISTORY = "pretrain_history.csv"
MODEL_CKPT = "model.ckpt"
HISTORY_FILE = "history.csv"
REPORT_FILE = "report.json"
DATA_SOURCES = ("diffusion", "edge-list", "window-correlation")


@dataclasses.dataclass
class SplitConfig(JSONConfig):
    """
    Train/validation/test fractions and the seed of the random split policy.
    """

    fractions: List[float] = dataclasses.field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    seed: int = 0


@dataclasses.dataclass
class PipelineConfig:
    """
    Sections of a pipeline config file: `model`, `train`, `data` and `split`.

    The `data` section names a `source` (`diffusion`, `edge-list` or `window-correlation`)
    and that recipe's parameters. Relative paths in it resolve against `base_dir`.
    """

    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: Dict[str, Any] = dataclasses.field(default_factory=dict)
    split: SplitConfig = dataclasses.field(default_factory=SplitConfig)
    base_dir: Path = dataclasses.field(default_factory=Path)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Union[str, Path] = ".") -> PipelineConfig:
        known = {"model", "train", "data", "split"}
        for key in data:
            if key not in known:
                raise DynastyConfigError(
                    f"Unknown config section '{key}'. Expected one of: {', '.join(sorted(known))}"
                )
        return cls(
            model=ModelConfig.from_dict(data.get("model", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            data=dict(data.get("data", {})),
            split=SplitConfig.from_dict(data.get("split", {})),
            base_dir=Path(base_dir),
        )

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> PipelineConfig:
        with open(path) as config_file:
            try:
                data = json.load(config_file)
            except json.decoder.JSONDecodeError as e:
                raise DynastyConfigError(f"Could not parse '{path}': {e}") from e
        if not isinstance(data, dict):
            raise DynastyConfigError(f"Expected a JSON object in '{path}'.")
        return cls.from_dict(data, base_dir=Path(path).parent)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data,
            "split": self.split.to_dict(),
        }

    def with_seed(self, seed: Optional[int]) -> PipelineConfig:
        """
        Override the training seed and the initialisation seed.
        """

        if seed is None:
            return self
        return dataclasses.replace(
            self, model=self.model.replace(init_seed=seed), train=self.train.replace(seed=seed)
        )

    def data_path(self) -> Optional[Path]:
        path = self.data.get("path")
        return None if path is None else self.base_dir / path


@dataclasses.dataclass
class RunManifest:
    """
    Record of one command: resolved config, paths, seed, timestamps and a hash of the inputs.

    Wall-clock timings of the stages are kept here, never in reports.
    """

    command: str
    config: Dict[str, Any]
    inputs: Dict[str, str] = dataclasses.field(default_factory=dict)
    outputs: Dict[str, str] = dataclasses.field(default_factory=dict)
    seed: Optional[int] = None
    started_at: str = ""
    finished_at: str = ""
    input_hash: str = ""
    timings: Dict[str, float] = dataclasses.field(default_factory=dict)

    @classmethod
    def start(
        cls,
        command: str,
        config: Dict[str, Any],
        inputs: Dict[str, Union[str, Path]],
        seed: Optional[int] = None,
    ) -> RunManifest:
        existing = [Path(p) for p in inputs.values() if Path(p).exists()]
        return cls(
            command=command,
            config=config,
            inputs={name: str(path) for name, path in inputs.items()},
            seed=seed,
            started_at=_now(),
            input_hash=content_hash(existing),
        )

    def finish(self, outputs: Dict[str, Union[str, Path]]) -> None:
        self.outputs = {name: str(path) for name, path in outputs.items()}
        self.finished_at = _now()

    def write(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / manifest_name(self.command)
        path.write_text(json_dump_pretty(dataclasses.asdict(self)) + "\n")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> RunManifest:
        with open(path) as manifest_file:
            return cls(**json.load(manifest_file))


def manifest_name(command: str) -> str:
    return f"{command}.manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# Stages


def build_dataset(config: PipelineConfig) -> Dataset:
    """
    Build the raw dataset described by the config's `data` section.
    """

    section = dict(config.data)
    source = section.pop("source", "diffusion")
    section.pop("path", None)
    if source not in DATA_SOURCES:
        raise DynastyConfigError(
            f"Unknown data source '{source}'. Expected one of: {', '.join(DATA_SOURCES)}"
        )

    def option(name: str, default: Any = None) -> Any:
        return section.pop(name, default)

    try:
        if source == "diffusion":
            dataset = generate_diffusion_dataset(
                N=option("N", 10),
                D=option("D", config.model.feature_dim),
                L=option("L", config.model.history_len),
                H=option("H", config.model.horizon),
                num_samples=option("num_samples", 8),
                graph_switch_prob=option("graph_switch_prob", 0.2),
                noise_std=option("noise_std", 0.05),
                seed=option("seed", 0),
                beta=option("beta", 0.5),
                avg_degree=option("avg_degree"),
                constant_signals=option("constant_signals", False),
            )
        else:
            path = config.data_path()
            if path is None:
                raise DynastyConfigError(f"Data source '{source}' needs a 'path'.")
            L = option("L", config.model.history_len)
            H = option("H", config.model.horizon)
            if source == "edge-list":
                dataset = ingest_edge_list(
                    read_edge_csv(path), option("interval_seconds", 86400), L, H
                )
            else:
                window, stride = option("window", 20), option("stride", 1)
                threshold = option("corr_threshold", 0.8)
                series = load_series(path)
                if len(series) == 1:
                    (subject, values), = series.items()
                    dataset = window_correlation_graphs(
                        values, window, stride, threshold, L, H, subject_id=subject
                    )
                else:
                    dataset = window_correlation_cohort(series, window, stride, threshold, L, H)
    except TypeError as e:
        raise DynastyConfigError(f"Invalid '{source}' data parameters: {e}") from e
    if section:
        raise DynastyConfigError(
            f"Unknown '{source}' data parameter(s): {', '.join(sorted(section))}"
        )
    return dataset


def check_model_fits(config: ModelConfig, dataset: Dataset) -> None:
    N, D, L, H = dataset.dims
    for name, model_value, data_value in (
        ("feature_dim", config.feature_dim, D),
        ("history_len", config.history_len, L),
        ("horizon", config.horizon, H),
    ):
        if model_value != data_value:
            raise DynastyConfigError(
                f"Model '{name}' is {model_value} but the dataset has {data_value}."
            )


def prepare_splits(
    dataset: Dataset, split: SplitConfig, stats: Optional[NormStats] = None
) -> Tuple[Tuple[Dataset, Dataset, Dataset], NormStats]:
    """
    Split, fit statistics on the training split unless given, and normalise all three parts.
    """

    train, val, test = split_dataset(dataset, split.fractions, split.seed)
    stats = stats if stats is not None else fit_normalizer(train)
    return (
        normalize_dataset(train, stats),
        normalize_dataset(val, stats),
        normalize_dataset(test, stats),
    ), stats


def read_stats(path: Union[str, Path]) -> NormStats:
    with open(path) as stats_file:
        try:
            return NormStats.from_dict(json.load(stats_file))
        except json.decoder.JSONDecodeError as e:
            raise DynastyDataError(f"Could not parse '{path}': {e}") from e


def write_stats(stats: NormStats, path: Union[str, Path]) -> None:
    Path(path).write_text(json_dump_pretty(stats.to_dict()) + "\n")


@dataclasses.dataclass
class PipelineResult:
    model: ForecasterBase
    history: TrainHistory
    report: Optional[EvalReport]
    manifest: RunManifest


def stage_dataset(config: PipelineConfig, run_dir: Path, data_dir: Optional[Path] = None) -> Dataset:
    if data_dir is not None:
        return load_dataset(data_dir)
    target = run_dir / DATASET_DIR
    if (target / "manifest.json").exists():
        logger.info("Reusing dataset in '%s'.", target)
        return load_dataset(target)
    dataset = build_dataset(config)
    save_dataset(dataset, target)
    logger.info("Built %d samples into '%s'.", len(dataset), target)
    return dataset


def stage_stats(config: PipelineConfig, run_dir: Path, dataset: Dataset):
    path = run_dir / STATS_FILE
    stats = read_stats(path) if path.exists() else None
    splits, stats = prepare_splits(dataset, config.split, stats)
    if not path.exists():
        write_stats(stats, path)
    return splits, stats


def stage_pretrain(
    config: PipelineConfig, run_dir: Path, train: Dataset, timings: Dict[str, float]
) -> Optional[ForecasterBase]:
    path = run_dir / PRETRAIN_CKPT
    if (path / "manifest.json").exists():
        logger.info("Reusing pretrained checkpoint '%s'.", path)
        return load_checkpoint(path)
    if config.train.pretrain_epochs == 0:
        return None
    model, history = run_pretraining(DynastyModel(config.model), train, config.train)
    save_checkpoint(model, path)
    history.to_csv(run_dir / PRETRAIN_HISTORY)
    timings["pretrain_seconds"] = history.total_seconds
    return model


def stage_train(
    config: PipelineConfig,
    run_dir: Path,
    splits: Tuple[Dataset, Dataset, Dataset],
    skip_pretrain: bool,
    timings: Dict[str, float],
) -> Tuple[ForecasterBase, TrainHistory]:
    checkpoint, history_path = run_dir / MODEL_CKPT, run_dir / HISTORY_FILE
    if (checkpoint / "manifest.json").exists() and history_path.exists():
        logger.info("Reusing trained checkpoint '%s'.", checkpoint)
        return load_checkpoint(checkpoint), TrainHistory.from_csv(history_path)

    train, val, _ = splits
    model = None if skip_pretrain else stage_pretrain(config, run_dir, train, timings)
    if model is None:
        model = DynastyModel(config.model)
    start = time.perf_counter()
    model, history = run_training(
        model, train, val, config.train, pretrain_seconds=timings.get("pretrain_seconds", 0.0)
    )
    timings["train_seconds"] = time.perf_counter() - start
    timings["train_seconds_per_epoch"] = history.seconds_per_epoch()
    save_checkpoint(model, checkpoint)
    history.to_csv(history_path)
    return model, history


def stage_eval(
    run_dir: Path, model: ForecasterBase, test: Dataset, timings: Dict[str, float]
) -> EvalReport:
    report = evaluate_model(model, test, test.norm_stats)
    report.write_json(run_dir / REPORT_FILE)
    timings["inference_seconds"] = report.wall_seconds
    return report


def run_pipeline(
    config: PipelineConfig,
    run_dir: Union[str, Path],
    data_dir: Optional[Union[str, Path]] = None,
    skip_pretrain: bool = False,
    evaluate: bool = True,
    command: str = "run",
    config_path: Optional[Union[str, Path]] = None,
) -> PipelineResult:
    """
    Dataset, split and normalise, pretrain, train and evaluate, resuming from outputs already in `run_dir`.

    Args:
        config: Pipeline config (seed overrides already applied).
        run_dir: Run directory. Created if missing.
        data_dir: Existing raw dataset to use instead of building `run_dir/dataset`.
        skip_pretrain: Fine-tune from a fresh model.
        evaluate: Evaluate on the test split and write `report.json`.
        command: Command name recorded in the manifest.
        config_path: Config file, hashed as an input.

    Returns:
        The trained model, its history, the report (if evaluated) and the written manifest.
    """

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    inputs: Dict[str, Union[str, Path]] = {}
    if config_path is not None:
        inputs["config"] = config_path
    if data_dir is not None:
        inputs["data"] = data_dir
    elif config.data_path() is not None:
        inputs["data"] = config.data_path()  # type: ignore
    manifest = RunManifest.start(command, config.to_dict(), inputs, seed=config.train.seed)
    manifest.config["skip_pretrain"] = skip_pretrain

    dataset = stage_dataset(config, run_dir, None if data_dir is None else Path(data_dir))
    check_model_fits(config.model, dataset)
    splits, _ = stage_stats(config, run_dir, dataset)
    timings: Dict[str, float] = {}
    model, history = stage_train(config, run_dir, splits, skip_pretrain, timings)

    outputs: Dict[str, Union[str, Path]] = {
        "stats": run_dir / STATS_FILE,
        "model": run_dir / MODEL_CKPT,
        "history": run_dir / HISTORY_FILE,
    }
    if data_dir is None:
        outputs["dataset"] = run_dir / DATASET_DIR
    if (run_dir / PRETRAIN_CKPT).exists():
        outputs["pretrain"] = run_dir / PRETRAIN_CKPT
    report = None
    if evaluate:
        report = stage_eval(run_dir, model, splits[2], timings)
        outputs["report"] = run_dir / REPORT_FILE

    manifest.timings = timings
    manifest.finish(outputs)
    manifest.write(run_dir)
    return PipelineResult(model, history, report, manifest)
