from __future__ import annotations
import os
import json
import math
import dataclasses
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union
from .exceptions import DynastyConfigError


class DynastyEnv:
    """
    Class containing the environment variable names recognised by Dynasty.

    These attributes and the environment variable names are:
    ```python
    DynastyEnv.THREADS = "DYNASTY_THREADS"
    DynastyEnv.COLOURS = "DYNASTY_COLOURS"
    ```

    Examples:
        Cap evaluation and ablation fan-out at four workers, and turn off colours:
        ```
        $ export DYNASTY_THREADS=4
        $ export DYNASTY_COLOURS=NONE
        ```
    """

    THREADS = "DYNASTY_THREADS"
    COLOURS = "DYNASTY_COLOURS"


def worker_count() -> int:
    """
    Number of workers allowed for fan-out, read from `DYNASTY_THREADS`.

    Returns:
        A positive worker count (default 1).
    """

    value = os.getenv(DynastyEnv.THREADS, "").strip()
    if not value:
        return 1
    try:
        count = int(value)
    except ValueError:
        raise DynastyConfigError(
            f"'{DynastyEnv.THREADS}' must be a positive integer. Received: '{value}'"
        )
    if count < 1:
        raise DynastyConfigError(
            f"'{DynastyEnv.THREADS}' must be a positive integer. Received: {count}"
        )
    return count


LR_SCHEDULES = ("constant", "cosine")

ConfigT = TypeVar("ConfigT", bound="JSONConfig")


class JSONConfig:
    """
    Mixin giving dataclass configs a JSON representation whose keys are the field names.
    """

    @classmethod
    def from_dict(cls: Type[ConfigT], data: Dict[str, Any]) -> ConfigT:
        names = {field.name for field in dataclasses.fields(cls)}  # type: ignore
        for key in data:
            if key not in names:
                raise DynastyConfigError(
                    f"Unknown {cls.__name__} field '{key}'. Expected one of: {', '.join(sorted(names))}"
                )
        return cls(**data)  # type: ignore

    @classmethod
    def from_json(cls: Type[ConfigT], path: Union[str, Path]) -> ConfigT:
        with open(path) as config_file:
            try:
                data = json.load(config_file)
            except json.decoder.JSONDecodeError as e:
                raise DynastyConfigError(f"Could not parse '{path}': {e}") from e
        if not isinstance(data, dict):
            raise DynastyConfigError(f"Expected a JSON object in '{path}'.")
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)  # type: ignore

    def replace(self: ConfigT, **changes: Any) -> ConfigT:
        return dataclasses.replace(self, **changes)  # type: ignore


def _require_positive_int(name: str, value: Any) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise DynastyConfigError(
            f"'{name}' must be a positive integer. Received: {value!r}"
        )


def _require_non_negative_int(name: str, value: Any) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise DynastyConfigError(
            f"'{name}' must be a non-negative integer. Received: {value!r}"
        )


def _require_rate(name: str, value: float, upper_inclusive: bool = True) -> None:
    upper_ok = value <= 1.0 if upper_inclusive else value < 1.0
    if not (isinstance(value, (int, float)) and 0.0 <= value and upper_ok):
        bound = "[0, 1]" if upper_inclusive else "[0, 1)"
        raise DynastyConfigError(f"'{name}' must lie in {bound}. Received: {value!r}")


@dataclasses.dataclass
class ModelConfig(JSONConfig):
    """
    Architecture settings for the edge-biased forecaster.

    The defaults use 4 attention heads, 4 transformer layers, 48 hidden dimensions and a 2-layer, 64-wide edge-bias MLP.

    Args:
        feature_dim: Node feature dimension `D`.
        hidden_dim: Hidden dimension `d`. Must be divisible by `num_heads`.
        num_heads: Attention heads `h`.
        num_layers: Number of edge-biased spatial attention layers.
        history_len: History length `L`.
        horizon: Forecast horizon `H`.
        edge_dropout_rate: Probability of zeroing each adjacency entry during training.
        feature_dropout_rate: Inverted-dropout rate applied after the input embedding during training.
        temporal_attention: Insert per-node temporal self-attention after the spatial stack.
        bias_mlp_hidden: Width of each hidden layer of the edge-bias MLP.
        bias_mlp_layers: Number of hidden layers of the edge-bias MLP.
        max_history_len: Rows of the positional-encoding table. Defaults to `history_len`.
        tie_reconstruction_head: Reuse the forecast head for masked reconstruction.
        init_seed: Seed for parameter initialisation.
    """

    feature_dim: int = 1
    hidden_dim: int = 48
    num_heads: int = 4
    num_layers: int = 4
    history_len: int = 12
    horizon: int = 8
    edge_dropout_rate: float = 0.1
    feature_dropout_rate: float = 0.0
    temporal_attention: bool = False
    bias_mlp_hidden: int = 64
    bias_mlp_layers: int = 2
    max_history_len: Optional[int] = None
    tie_reconstruction_head: bool = True
    init_seed: int = 0

    @classmethod
    def _validate_sizes(cls, config: ModelConfig) -> None:
        for name in (
            "feature_dim",
            "hidden_dim",
            "num_heads",
            "history_len",
            "horizon",
            "bias_mlp_hidden",
            "bias_mlp_layers",
        ):
            _require_positive_int(name, getattr(config, name))
        _require_non_negative_int("num_layers", config.num_layers)
        _require_non_negative_int("init_seed", config.init_seed)

        if config.hidden_dim % config.num_heads:
            raise DynastyConfigError(
                f"'hidden_dim' ({config.hidden_dim}) must be divisible by 'num_heads' ({config.num_heads})."
            )

    @classmethod
    def _validate_rates(cls, config: ModelConfig) -> None:
        _require_rate("edge_dropout_rate", config.edge_dropout_rate, upper_inclusive=False)
        _require_rate(
            "feature_dropout_rate", config.feature_dropout_rate, upper_inclusive=False
        )

    def __post_init__(self) -> None:
        self._validate_sizes(self)
        self._validate_rates(self)
        if self.max_history_len is None:
            self.max_history_len = self.history_len
        _require_positive_int("max_history_len", self.max_history_len)
        if self.max_history_len < self.history_len:
            raise DynastyConfigError(
                f"'max_history_len' ({self.max_history_len}) must be at least 'history_len' ({self.history_len})."
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclasses.dataclass
class TrainConfig(JSONConfig):
    """
    Optimiser, schedule, loss-weight, masking and curriculum settings.

    Args:
        learning_rate: Adam step size.
        max_epochs: Upper bound on fine-tuning epochs.
        pretrain_epochs: Epochs of masked pretraining before fine-tuning.
        batch_size: Samples per mini-batch.
        lambda_var: Weight of the variation loss.
        horizon_decay: Ratio `γ` of the exponentially decaying horizon weights.
        mask_prob: Masking probability for pretraining.
        epsilon: Stabiliser in the masked reconstruction loss denominator.
        sampling_decay_epochs: Epochs over which the teacher-forcing probability decays linearly to zero.
        mix_alpha: Weight of the ground truth in the scheduled-sampling mix.
        curriculum_start_horizon: Supervised horizon at epoch 0.
        curriculum_step_epochs: Epochs between curriculum horizon increments.
        early_stop_patience: Epochs without validation improvement before stopping. `None` never stops early.
        seed: Seed for batching, masking, dropout and scheduled sampling.
        grad_clip_norm: Global gradient-norm clip. `None` disables clipping.
        lr_schedule: `constant`, or `cosine` to anneal each loop from `learning_rate` down to `min_learning_rate` at its last epoch.
        min_learning_rate: Final step size of the `cosine` schedule.
    """

    learning_rate: float = 1e-3
    max_epochs: int = 100
    pretrain_epochs: int = 15
    batch_size: int = 8
    lambda_var: float = 0.1
    horizon_decay: float = 0.9
    mask_prob: float = 0.15
    epsilon: float = 1e-8
    sampling_decay_epochs: int = 30
    mix_alpha: float = 0.5
    curriculum_start_horizon: int = 2
    curriculum_step_epochs: int = 5
    early_stop_patience: Optional[int] = 10
    seed: int = 0
    grad_clip_norm: Optional[float] = 5.0
    lr_schedule: str = "constant"
    min_learning_rate: float = 0.0

    @classmethod
    def _validate_schedule(cls, config: TrainConfig) -> None:
        _require_non_negative_int("max_epochs", config.max_epochs)
        _require_non_negative_int("pretrain_epochs", config.pretrain_epochs)
        _require_positive_int("batch_size", config.batch_size)
        _require_positive_int("sampling_decay_epochs", config.sampling_decay_epochs)
        _require_positive_int("curriculum_start_horizon", config.curriculum_start_horizon)
        _require_positive_int("curriculum_step_epochs", config.curriculum_step_epochs)
        _require_non_negative_int("seed", config.seed)
        if config.early_stop_patience is not None:
            _require_positive_int("early_stop_patience", config.early_stop_patience)

    @classmethod
    def _validate_weights(cls, config: TrainConfig) -> None:
        if not config.learning_rate > 0 or not math.isfinite(config.learning_rate):
            raise DynastyConfigError(
                f"'learning_rate' must be positive. Received: {config.learning_rate!r}"
            )
        if config.lambda_var < 0:
            raise DynastyConfigError(
                f"'lambda_var' must be non-negative. Received: {config.lambda_var!r}"
            )
        if not 0.0 < config.horizon_decay <= 1.0:
            raise DynastyConfigError(
                f"'horizon_decay' must lie in (0, 1]. Received: {config.horizon_decay!r}"
            )
        if config.epsilon < 0:
            raise DynastyConfigError(
                f"'epsilon' must be non-negative. Received: {config.epsilon!r}"
            )
        if config.grad_clip_norm is not None and not config.grad_clip_norm > 0:
            raise DynastyConfigError(
                f"'grad_clip_norm' must be positive or null. Received: {config.grad_clip_norm!r}"
            )
        _require_rate("mask_prob", config.mask_prob)
        _require_rate("mix_alpha", config.mix_alpha)
        if config.lr_schedule not in LR_SCHEDULES:
            raise DynastyConfigError(
                f"'lr_schedule' must be one of: {', '.join(LR_SCHEDULES)}. Received: {config.lr_schedule!r}"
            )
        if not 0.0 <= config.min_learning_rate <= config.learning_rate:
            raise DynastyConfigError(
                f"'min_learning_rate' must lie in [0, learning_rate]. Received: {config.min_learning_rate!r}"
            )

    def __post_init__(self) -> None:
        self._validate_schedule(self)
        self._validate_weights(self)

    def check_horizon(self, horizon: int) -> None:
        """
        Ensure the curriculum fits inside a model's forecast horizon.
        """

        if self.curriculum_start_horizon > horizon:
            raise DynastyConfigError(
                f"'curriculum_start_horizon' ({self.curriculum_start_horizon}) exceeds the forecast horizon ({horizon})."
            )
