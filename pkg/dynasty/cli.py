import os
import sys
import enum
import json
import dataclasses
import logging
from pathlib import Path
from typing import Optional, List, Dict, Any, Sequence
import click
import typer
from typer.core import TyperGroup
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from .version import __version__
from .config import DynastyEnv
from .data import (
    Dataset,
    aggregate_static_consensus,
    aggregate_static_union,
    load_dataset,
    repeat_static_graph,
    save_dataset,
)
from .model import DynastyModel, load_checkpoint, save_checkpoint
from .training import run_pretraining
from .evaluation import (
    SWEEP_PARAMETERS,
    AblationSpec,
    EvalReport,
    evaluate_model,
    run_ablation_suite,
    run_sensitivity_sweep,
    write_sweep,
)
from .pipeline import (
    MODEL_CKPT,
    PRETRAIN_CKPT,
    PRETRAIN_HISTORY,
    REPORT_FILE,
    STATS_FILE,
    PipelineConfig,
    RunManifest,
    SplitConfig,
    build_dataset,
    check_model_fits,
    manifest_name,
    prepare_splits,
    read_stats,
    run_pipeline,
    write_stats,
)
from .storage import json_dump_pretty
from . import exceptions


color_system = "auto"
if os.getenv(DynastyEnv.COLOURS, "").upper().strip() == "NONE":
    from typer import rich_utils

    rich_utils.COLOR_SYSTEM = None
    color_system = None

console = Console(color_system=color_system)


class DefinedOrderGroup(TyperGroup):
    def list_commands(self, ctx):
        return self.commands.keys()


app = typer.Typer(
    name="dynasty",
    help="Forecast node signals on dynamic graphs.",
    cls=DefinedOrderGroup,
    no_args_is_help=True,
    pretty_exceptions_show_locals=False,
    add_completion=False,
    context_settings={"help_option_names": ["-h", "--help"]},
)


class CommandError(click.exceptions.ClickException):
    """
    Data or contract failure of a command.
    """

    exit_code = 2


def setup_logging(verbose: bool = False) -> None:
    """
    Send the `dynasty` logger to stderr through rich.

    Args:
        verbose: Log at DEBUG instead of INFO.
    """

    logger = logging.getLogger("dynasty")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = RichHandler(
        console=Console(stderr=True, color_system=color_system),
        show_path=False,
    )
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def handle_error(e: Exception) -> None:
    """
    Handle a Dynasty exception, coercing into a CLI-friendly format if possible.

    Args:
        e: The exception to handle.

    Raises:
        CommandError: If the exception is a DynastyError or a missing file.
        Exception: Otherwise.
    """

    if isinstance(e, exceptions.DynastyError):
        raise CommandError(str(e))

    elif isinstance(e, FileNotFoundError):
        raise CommandError(f"File not found: {e.filename or e}")

    else:
        raise e


def require_path(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(2, f"{what} does not exist", str(path))
    return path


def read_json_object(path: Path) -> Dict[str, Any]:
    with open(require_path(path, "JSON file")) as json_file:
        try:
            data = json.load(json_file)
        except json.decoder.JSONDecodeError as e:
            raise exceptions.DynastyConfigError(f"Could not parse '{path}': {e}") from e
    if not isinstance(data, dict):
        raise exceptions.DynastyConfigError(f"Expected a JSON object in '{path}'.")
    return data


def load_config(path: Optional[Path], seed: Optional[int] = None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().with_seed(seed)
    return PipelineConfig.from_json(require_path(path, "Config file")).with_seed(seed)


def parse_int_list(option: str, value: Optional[str]) -> Optional[List[int]]:
    """
    Parse a comma-separated list of integers.

    Raises:
        click.BadParameter: If an item is not an integer.
    """

    if value is None:
        return None
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise click.BadParameter(
            f"Expected comma-separated integers. Received: {value!r}",
            param_hint=f"'{option}'",
        )


def create_table(rows: List[Dict[str, Any]], columns: Sequence[str]) -> Table:
    table = Table(
        show_lines=True,
    )

    for column in columns:
        table.add_column(column, overflow="fold")

    for row in rows:
        table.add_row(*(format_value(row.get(column, "")) for column in columns))

    return table


def format_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def print_report(report: EvalReport, format: Optional["InfoFormats"]) -> None:
    if format == InfoFormats.JSON:
        console.print_json(json_dump_pretty(report.to_dict()))
    else:
        rows = [
            {"step": step + 1, "mae": mae, "rmse": rmse}
            for step, (mae, rmse) in enumerate(zip(report.mae_per_step, report.rmse_per_step))
        ]
        rows.append({"step": "all", "mae": report.mae, "rmse": report.rmse})
        console.print(create_table(rows, ("step", "mae", "rmse")))


def input_paths(**paths: Optional[Path]) -> Dict[str, Path]:
    return {name: path for name, path in paths.items() if path is not None}


def load_data(path: Path) -> Dataset:
    return load_dataset(require_path(path, "Dataset"))


class HelpText(enum.Enum):
    CONFIG = "Pipeline config file with `model`, `train`, `data` and `split` sections."
    DATA = "Dataset directory."
    OUT = "Output directory."
    SEED = "Seed overriding the configured training and initialisation seeds."
    SKIP_PRETRAIN = "Fine-tune from a freshly initialised model."
    FORMAT = "Set the format of the printed results."
    ABLATION_SPEC = "Ablation spec file (toggles, seeds, consensus threshold)."
    SEEDS = "Comma-separated seeds."
    MODE = "How the static graph is aggregated."
    TAU = "Consensus co-occurrence threshold."
    PARAMETER = "Model setting to vary."
    VALUES = "Comma-separated values of the varied setting."
    VERBOSE = "Log debugging messages."


class InfoFormats(enum.Enum):
    TABLE = "table"
    JSON = "json"


class StaticModes(enum.Enum):
    CONSENSUS = "consensus"
    UNION = "union"


class Messages(enum.Enum):
    SUCCESS = "[bold green][SUCCESS][/]"
    NOTE = "[bold cyan][NOTE][/]"


def finish(manifest: RunManifest, directory: Path, outputs: Dict[str, Any]) -> None:
    manifest.finish(outputs)
    manifest.write(directory)
    console.print(f"{Messages.SUCCESS.value} Wrote outputs to: {directory}")


def write_dataset(
    command: str,
    dataset: Dataset,
    out: Path,
    config: Dict[str, Any],
    inputs: Dict[str, Any],
    seed: Optional[int] = None,
) -> None:
    manifest = RunManifest.start(command, config, inputs, seed=seed)
    save_dataset(dataset, out)
    finish(manifest, out, {"dataset": out})
    console.print(
        f"{Messages.NOTE.value} {len(dataset)} samples with N, D, L, H = {dataset.dims}"
    )


@app.command(rich_help_panel="Data")
def generate(
    config: Path = typer.Option(..., "--config", help=HelpText.CONFIG.value),
    out: Path = typer.Option(..., "--out", help=HelpText.OUT.value),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed overriding the data recipe's seed."),
):
    """
    Build a dataset from the config's `data` section.
    """

    try:
        pipeline_config = load_config(config)
        if seed is not None:
            pipeline_config.data["seed"] = seed
        dataset = build_dataset(pipeline_config)
        write_dataset(
            "generate", dataset, out, pipeline_config.to_dict(), {"config": config}, seed=seed
        )
    except Exception as e:
        handle_error(e)


@app.command(name="ingest-edges", rich_help_panel="Data")
def ingest_edges(
    data: Path = typer.Option(..., "--data", help="CSV of timestamped signed ratings."),
    out: Path = typer.Option(..., "--out", help=HelpText.OUT.value),
    config: Optional[Path] = typer.Option(None, "--config", help=HelpText.CONFIG.value),
):
    """
    Bucket a timestamped edge list into windowed dynamic-graph samples.
    """

    try:
        pipeline_config = load_config(config)
        pipeline_config.data.update(source="edge-list", path=str(require_path(data, "Edge list").resolve()))
        dataset = build_dataset(pipeline_config)
        write_dataset(
            "ingest-edges", dataset, out, pipeline_config.to_dict(), input_paths(config=config, data=data)
        )
    except Exception as e:
        handle_error(e)


@app.command(name="window-corr", rich_help_panel="Data")
def window_corr(
    data: Path = typer.Option(..., "--data", help="Series bundle with one [N, T] tensor per subject."),
    out: Path = typer.Option(..., "--out", help=HelpText.OUT.value),
    config: Optional[Path] = typer.Option(None, "--config", help=HelpText.CONFIG.value),
):
    """
    Turn multivariate series into thresholded sliding-window correlation graphs.
    """

    try:
        pipeline_config = load_config(config)
        pipeline_config.data.update(
            source="window-correlation", path=str(require_path(data, "Series bundle").resolve())
        )
        dataset = build_dataset(pipeline_config)
        write_dataset(
            "window-corr", dataset, out, pipeline_config.to_dict(), input_paths(config=config, data=data)
        )
    except Exception as e:
        handle_error(e)


@app.command(name="aggregate-static", rich_help_panel="Data")
def aggregate_static(
    data: Path = typer.Option(..., "--data", help=HelpText.DATA.value),
    out: Path = typer.Option(..., "--out", help=HelpText.OUT.value),
    mode: StaticModes = typer.Option(StaticModes.CONSENSUS.value, "--mode", help=HelpText.MODE.value),
    tau: float = typer.Option(0.5, "--tau", help=HelpText.TAU.value),
):
    """
    Repeat one aggregated static graph over every sample's history.
    """

    try:
        dataset = load_data(data)
        if mode == StaticModes.CONSENSUS:
            A_static = aggregate_static_consensus(dataset, tau)
            variant = repeat_static_graph(dataset, A_static, graph="static-consensus", consensus_tau=tau)
        else:
            A_static = aggregate_static_union(dataset)
            variant = repeat_static_graph(dataset, A_static, graph="static-union")
        manifest = RunManifest.start(
            "aggregate-static", {"mode": mode.value, "tau": tau}, {"data": data}
        )
        save_dataset(variant, out)
        graph_path = out / "static_graph.json"
        graph_path.write_text(json_dump_pretty(A_static.tolist()) + "\n")
        finish(manifest, out, {"dataset": out, "static_graph": graph_path})
        console.print(f"{Messages.NOTE.value} Static graph keeps {int(A_static.sum())} edges.")
    except Exception as e:
        handle_error(e)


@app.command(rich_help_panel="Training")
def pretrain(
    config: Path = typer.Option(..., "--config", help=HelpText.CONFIG.value),
    data: Path = typer.Option(..., "--data", help=HelpText.DATA.value),
    out: Path = typer.Option(..., "--out", help=HelpText.OUT.value),
    seed: Optional[int] = typer.Option(None, "--seed", help=HelpText.SEED.value),
):
    """
    Masked-reconstruction pretraining on the training split.
    """

    try:
        pipeline_config = load_config(config, seed)
        dataset = load_data(data)
        check_model_fits(pipeline_config.model, dataset)
        manifest = RunManifest.start(
            "pretrain", pipeline_config.to_dict(), {"config": config, "data": data}, seed=pipeline_config.train.seed
        )
        (train, _, _), stats = prepare_splits(dataset, pipeline_config.split)
        out.mkdir(parents=True, exist_ok=True)
        write_stats(stats, out / STATS_FILE)
        model, history = run_pretraining(DynastyModel(pipeline_config.model), train, pipeline_config.train)
        save_checkpoint(model, out / PRETRAIN_CKPT)
        history.to_csv(out / PRETRAIN_HISTORY)
        manifest.timings = {"pretrain_seconds": history.total_seconds}
        finish(
            manifest,
            out,
            {
                "stats": out / STATS_FILE,
                "pretrain": out / PRETRAIN_CKPT,
                "history": out / PRETRAIN_HISTORY,
            },
        )
    except Exception as e:
        handle_error(e)


@app.command(rich_help_panel="Training")
def train(
    config: Path = typer.Option(..., "--config", help=HelpText.CONFIG.value),
    data: Path = typer.Option(..., "--data", help=HelpText.DATA.value),
    out: Path = typer.Option(..., "--out", help=HelpText.OUT.value),
    seed: Optional[int] = typer.Option(None, "--seed", help=HelpText.SEED.value),
    skip_pretrain: bool = typer.Option(False, "--skip-pretrain", help=HelpText.SKIP_PRETRAIN.value),
):
    """
    Fine-tune a forecaster, starting from `pretrain.ckpt` in the output directory when present.
    """

    try:
        pipeline_config = load_config(config, seed)
        result = run_pipeline(
            pipeline_config,
            out,
            data_dir=require_path(data, "Dataset"),
            skip_pretrain=skip_pretrain,
            evaluate=False,
            command="train",
            config_path=config,
        )
        history = result.history
        console.print(
            f"{Messages.SUCCESS.value} Best validation RMSE {format_value(history.best_val_rmse)} "
            f"at epoch {history.best_epoch} of {len(history.records)}."
        )
    except Exception as e:
        handle_error(e)


def eval_split_config(config: Optional[Path], out: Path) -> SplitConfig:
    if config is not None:
        return load_config(config).split
    for command in ("train", "run"):
        path = out / manifest_name(command)
        if path.exists():
            return SplitConfig.from_dict(RunManifest.read(path).config.get("split", {}))
    return SplitConfig()


@app.command(name="eval", rich_help_panel="Evaluation")
def evaluate(
    data: Path = typer.Option(..., "--data", help=HelpText.DATA.value),
    out: Path = typer.Option(..., "--out", help="Run directory holding model.ckpt and stats.json."),
    config: Optional[Path] = typer.Option(None, "--config", help="Config whose `split` section picks the test split. Defaults to the run's own."),
    format: Optional[InfoFormats] = typer.Option(
        InfoFormats.TABLE.value,
        "-F",
        "--format",
        help=HelpText.FORMAT.value,
    ),
):
    """
    Evaluate the run's checkpoint on the test split and write `report.json`.
    """

    try:
        dataset = load_data(data)
        model = load_checkpoint(require_path(out / MODEL_CKPT, "Checkpoint"))
        stats = read_stats(require_path(out / STATS_FILE, "Normalisation statistics"))
        split = eval_split_config(config, out)
        manifest = RunManifest.start(
            "eval",
            {"split": split.to_dict()},
            {"data": data, "model": out / MODEL_CKPT, "stats": out / STATS_FILE},
        )
        (_, _, test), _ = prepare_splits(dataset, split, stats)
        report = evaluate_model(model, test, stats)
        report.write_json(out / REPORT_FILE)
        manifest.timings = {"inference_seconds": report.wall_seconds}
        manifest.finish({"report": out / REPORT_FILE})
        manifest.write(out)
        print_report(report, format)
    except Exception as e:
        handle_error(e)


@app.command(rich_help_panel="Evaluation")
def ablate(
    config: Path = typer.Option(..., "--config", help=HelpText.CONFIG.value),
    data: Path = typer.Option(..., "--data", help=HelpText.DATA.value),
    out: Path = typer.Option(..., "--out", help=HelpText.OUT.value),
    ablation_spec: Optional[Path] = typer.Option(None, "--ablation-spec", help=HelpText.ABLATION_SPEC.value),
    seeds: Optional[str] = typer.Option(None, "--seeds", help=HelpText.SEEDS.value),
):
    """
    Train every ablation toggle for every seed and write per-seed and summary tables.
    """

    seed_list = parse_int_list("--seeds", seeds)
    try:
        pipeline_config = load_config(config)
        spec_data: Dict[str, Any] = {
            "model": pipeline_config.model.to_dict(),
            "train": pipeline_config.train.to_dict(),
        }
        if ablation_spec is not None:
            spec_data.update(read_json_object(ablation_spec))
        if seed_list is not None:
            spec_data["seeds"] = seed_list
        spec = AblationSpec.from_dict(spec_data)
        dataset = load_data(data)
        check_model_fits(spec.model, dataset)
        inputs: Dict[str, Any] = {"config": config, "data": data}
        if ablation_spec is not None:
            inputs["ablation_spec"] = ablation_spec
        manifest = RunManifest.start("ablate", spec.to_dict(), inputs)
        manifest.config["split"] = pipeline_config.split.to_dict()
        splits, _ = prepare_splits(dataset, pipeline_config.split)
        table = run_ablation_suite(spec, splits)
        paths = table.write(out)
        manifest.timings = {
            f"{cell.config}/{cell.seed}": cell.seconds for cell in table.cells
        }
        finish(manifest, out, {path.name: path for path in paths})
        console.print(
            create_table(
                table.to_dict()["summary"],
                ("config", "rmse_mean", "rmse_std", "mae_mean", "mae_std", "worse_than_full"),
            )
        )
    except Exception as e:
        handle_error(e)


@app.command(rich_help_panel="Evaluation")
def sweep(
    config: Path = typer.Option(..., "--config", help=HelpText.CONFIG.value),
    data: Path = typer.Option(..., "--data", help=HelpText.DATA.value),
    out: Path = typer.Option(..., "--out", help=HelpText.OUT.value),
    parameter: str = typer.Option(..., "--parameter", help=f"{HelpText.PARAMETER.value} One of: {', '.join(SWEEP_PARAMETERS)}"),
    values: str = typer.Option(..., "--values", help=HelpText.VALUES.value),
    seeds: str = typer.Option("0", "--seeds", help=HelpText.SEEDS.value),
):
    """
    Vary one architecture setting and record test error and runtime per value.
    """

    value_list = parse_int_list("--values", values) or []
    seed_list = parse_int_list("--seeds", seeds) or []
    try:
        pipeline_config = load_config(config)
        dataset = load_data(data)
        check_model_fits(pipeline_config.model, dataset)
        manifest = RunManifest.start(
            "sweep",
            {**pipeline_config.to_dict(), "parameter": parameter, "values": value_list, "seeds": seed_list},
            {"config": config, "data": data},
        )
        splits, _ = prepare_splits(dataset, pipeline_config.split)
        rows = run_sensitivity_sweep(
            parameter, value_list, splits, pipeline_config.model, pipeline_config.train, seed_list
        )
        paths = write_sweep(rows, out)
        finish(manifest, out, {path.name: path for path in paths})
        console.print(
            create_table(
                [dataclasses.asdict(row) for row in rows],
                ("value", "seed", "rmse", "mae", "train_seconds_per_epoch", "inference_seconds"),
            )
        )
    except Exception as e:
        handle_error(e)


@app.command(rich_help_panel="Pipeline")
def run(
    config: Path = typer.Option(..., "--config", help=HelpText.CONFIG.value),
    out: Path = typer.Option(..., "--out", help="Run directory. Completed stages in it are reused."),
    data: Optional[Path] = typer.Option(None, "--data", help="Dataset directory to use instead of the config's `data` recipe."),
    seed: Optional[int] = typer.Option(None, "--seed", help=HelpText.SEED.value),
    skip_pretrain: bool = typer.Option(False, "--skip-pretrain", help=HelpText.SKIP_PRETRAIN.value),
    format: Optional[InfoFormats] = typer.Option(
        InfoFormats.TABLE.value,
        "-F",
        "--format",
        help=HelpText.FORMAT.value,
    ),
):
    """
    Dataset, split, normalise, pretrain, train and evaluate in one run directory.
    """

    try:
        pipeline_config = load_config(config, seed)
        result = run_pipeline(
            pipeline_config,
            out,
            data_dir=None if data is None else require_path(data, "Dataset"),
            skip_pretrain=skip_pretrain,
            command="run",
            config_path=config,
        )
        if result.report is not None:
            print_report(result.report, format)
    except Exception as e:
        handle_error(e)


def version_callback(value: bool):
    if value:
        print(__version__)
        raise typer.Exit()


@app.callback()
def common(
    context: typer.Context,
    verbose: bool = typer.Option(False, "--verbose", help=HelpText.VERBOSE.value),
    version: Optional[bool] = typer.Option(
        None,
        "-v",
        "--version",
        callback=version_callback,
        help="Show the version number and exit.",
    ),
):
    """
    Forecast node signals on dynamic graphs.
    """

    setup_logging(verbose)


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command and return its exit code.

    Returns 0 on success, 1 on a usage error (unknown command or flag, bad value) after
    printing the message and the command's help, and 2 on a data or contract error.
    """

    command = typer.main.get_command(app)
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        result = command.main(args=args, prog_name="dynasty", standalone_mode=False)
    except click.exceptions.UsageError as e:
        click.echo(f"Error: {e.format_message()}", err=True)
        if e.ctx is not None:
            schema = e.ctx.get_help()
            if schema:
                click.echo(schema, err=True)
        return 1
    except click.exceptions.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    return result if isinstance(result, int) else 0


def main():
    sys.exit(parse_and_dispatch())
