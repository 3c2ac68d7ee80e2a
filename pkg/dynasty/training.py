"""
Losses, masking, schedules, the Adam optimiser and the pretrain / fine-tune loops.
"""
from __future__ import annotations
import csv
import math
import time
import logging
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple, Union
import numpy as np
from . import tensor as T
from .tensor import Tensor
from .config import TrainConfig, worker_count
from .data import Dataset
from .model import ForecasterBase, ForecastMode, ModelParameters
from .exceptions import (
    DynastyConfigError,
    DynastyContractError,
    DynastyDataError,
    DynastyDimensionError,
)


logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

HISTORY_COLUMNS = ("epoch", "train_loss", "val_rmse", "tf_prob", "horizon", "seconds")
PRETRAIN_COLUMNS = ("epoch", "pretrain_loss", "seconds")

# Purpose tags mixed into the seed so each loop owns an independent stream.
PRETRAIN_STREAM = 1
TRAIN_STREAM = 2


def _pair(name: str, Y_pred: Any, Y_true: Any) -> Tuple[Tensor, Tensor]:
    pred, true = Tensor.wrap(Y_pred), Tensor.wrap(Y_true)
    if pred.shape != true.shape:
        raise DynastyDimensionError(
            f"Operation '{name}' cannot compare shapes {list(pred.shape)} and {list(true.shape)}."
        )
    if pred.ndim < 1 or pred.shape[-1] < 1:
        raise DynastyDimensionError(f"Operation '{name}' needs at least one horizon step.")
    return pred, true


def _per_step_mean(values: Tensor) -> Tensor:
    # [..., H] -> [H], averaging everything but the horizon axis.
    steps = values.shape[-1]
    return T.reduce_mean(T.reshape(values, (values.size // steps, steps)), axis=0)


def horizon_weights(horizon: int, gamma: float) -> np.ndarray:
    """
    Exponentially decaying weights `gamma**t`, normalised to sum to 1.
    """

    weights = gamma ** np.arange(horizon, dtype=np.float64)
    return weights / weights.sum()


def horizon_weighted_mae(Y_pred: Any, Y_true: Any, gamma: float) -> Tensor:
    """
    Weighted sum over horizon steps of each step's MAE.

    Args:
        Y_pred: Predictions `[N, D, H_a]` (or batched).
        Y_true: Targets of the same shape.
        gamma: Decay ratio of the step weights.

    Returns:
        Scalar loss.
    """

    pred, true = _pair("horizon_weighted_mae", Y_pred, Y_true)
    per_step = _per_step_mean(T.absolute(pred - true))
    return T.reduce_sum(per_step * Tensor(horizon_weights(pred.shape[-1], gamma)))


def variation_loss(Y_pred: Any, Y_true: Any) -> Tensor:
    """
    Sum over consecutive step pairs of the MAE between predicted and true frame differences.

    Returns 0 when only one step is present.
    """

    pred, true = _pair("variation_loss", Y_pred, Y_true)
    steps = pred.shape[-1]
    if steps < 2:
        return Tensor(0.0)
    pred_diff = T.slice_axis(pred, -1, 1, steps) - T.slice_axis(pred, -1, 0, steps - 1)
    true_diff = true.values[..., 1:] - true.values[..., :-1]
    return T.reduce_sum(_per_step_mean(T.absolute(pred_diff - true_diff)))


def total_loss(Y_pred: Any, Y_true: Any, lambda_var: float, gamma: float) -> Tensor:
    """
    `horizon_weighted_mae + lambda_var * variation_loss`.
    """

    loss = horizon_weighted_mae(Y_pred, Y_true, gamma)
    if lambda_var == 0:
        return loss
    return loss + variation_loss(Y_pred, Y_true) * float(lambda_var)


def sample_mask(
    N: int, D: int, L: int, p_mask: float, rng: np.random.Generator
) -> np.ndarray:
    """
    Independent Bernoulli(`p_mask`) mask of shape `[N, D, L]`, as 0/1 floats.

    An all-zero draw is redrawn once and then accepted as is.
    """

    if not 0.0 <= p_mask <= 1.0:
        raise DynastyConfigError(f"'p_mask' must lie in [0, 1]. Received: {p_mask!r}")
    mask = rng.random((N, D, L)) < p_mask
    if not mask.any():
        mask = rng.random((N, D, L)) < p_mask
    return mask.astype(np.float64)


def masked_pretrain_loss(X_hat: Any, X_hist: Any, M: Any, epsilon: float) -> Tensor:
    """
    Squared reconstruction error summed over masked positions, divided by `sum(M) + epsilon`.

    Unmasked positions never contribute, whatever `X_hat` holds there. With no masked
    positions and `epsilon = 0` the loss is 0.
    """

    reconstruction = Tensor.wrap(X_hat)
    target = Tensor.wrap(X_hist).values
    mask = Tensor.wrap(M).values
    if not reconstruction.shape == target.shape == mask.shape:
        raise DynastyDimensionError(
            f"Operation 'masked_pretrain_loss' cannot compare shapes {list(reconstruction.shape)}, "
            f"{list(target.shape)} and mask {list(mask.shape)}."
        )
    # Zero the targets off the mask too, so non-finite placeholders cannot leak in.
    squared = T.reduce_sum(T.square((reconstruction - target * mask) * mask))
    denominator = float(mask.sum()) + epsilon
    if denominator == 0:
        return squared * 0.0
    return squared * (1.0 / denominator)


def teacher_forcing_prob(epoch: int, sampling_decay_epochs: int) -> float:
    """
    Linear decay `max(0, 1 - epoch / sampling_decay_epochs)`.
    """

    if not sampling_decay_epochs > 0:
        raise DynastyConfigError(
            f"'sampling_decay_epochs' must be positive. Received: {sampling_decay_epochs!r}"
        )
    if epoch < 0:
        raise DynastyConfigError(f"Epoch must be non-negative. Received: {epoch!r}")
    return max(0.0, 1.0 - epoch / sampling_decay_epochs)


def curriculum_horizon(epoch: int, cfg: TrainConfig, H: int) -> int:
    """
    Supervised horizon at `epoch`: grows by one every `curriculum_step_epochs`, capped at `H`.
    """

    return min(H, cfg.curriculum_start_horizon + epoch // cfg.curriculum_step_epochs)


def learning_rate_at(epoch: int, epochs: int, cfg: TrainConfig) -> float:
    """
    Step size for `epoch` of a loop running `epochs` epochs.

    The `cosine` schedule starts at `cfg.learning_rate` and reaches `cfg.min_learning_rate` on the last epoch.
    """

    if epoch < 0:
        raise DynastyConfigError(f"Epoch must be non-negative. Received: {epoch!r}")
    if cfg.lr_schedule == "constant" or epochs <= 1:
        return cfg.learning_rate
    progress = min(epoch, epochs - 1) / (epochs - 1)
    span = cfg.learning_rate - cfg.min_learning_rate
    return cfg.min_learning_rate + 0.5 * span * (1.0 + math.cos(math.pi * progress))


# Optimiser


@dataclasses.dataclass
class OptimizerState:
    """
    Adam moments per parameter name and the number of steps taken.
    """

    first: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    second: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


ParamTable = Union[ModelParameters, Mapping[str, Tensor]]


def _trainable(params: ParamTable) -> Dict[str, Tensor]:
    return {name: t for name, t in params.items() if t.requires_grad}


def global_grad_norm(params: ParamTable) -> float:
    return math.sqrt(
        sum(float(np.sum(t.grad * t.grad)) for t in _trainable(params).values() if t.grad is not None)
    )


def clip_gradients(params: ParamTable, max_norm: float) -> float:
    """
    Scale all gradients down so their global norm is at most `max_norm`.

    Returns:
        The norm before clipping.
    """

    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for t in _trainable(params).values():
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


def adam_step(
    params: ParamTable,
    grads: Optional[Mapping[str, np.ndarray]],
    state: OptimizerState,
    lr: float,
) -> OptimizerState:
    """
    One bias-corrected Adam update of every trainable parameter, in place.

    Args:
        params: Parameters by name. Those with `requires_grad` unset are skipped.
        grads: Gradients by name. Defaults to each parameter's `grad`.
        state: Moments and step counter, updated in place.
        lr: Step size.

    Returns:
        The updated state.

    Raises:
        DynastyContractError: If a trainable parameter has no gradient.
    """

    trainable = _trainable(params)
    resolved = {}
    for name, t in trainable.items():
        grad = t.grad if grads is None else grads.get(name)
        if grad is None:
            raise DynastyContractError(f"Parameter '{name}' has no gradient.")
        if np.shape(grad) != t.shape:
            raise DynastyDimensionError(
                f"Gradient of '{name}' has shape {list(np.shape(grad))} but the parameter has {list(t.shape)}."
            )
        resolved[name] = np.asarray(grad, dtype=np.float64)

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, grad in resolved.items():
        first = state.first.get(name)
        second = state.second.get(name)
        first = (1.0 - state.beta1) * grad if first is None else state.beta1 * first + (1.0 - state.beta1) * grad
        second = (
            (1.0 - state.beta2) * grad * grad
            if second is None
            else state.beta2 * second + (1.0 - state.beta2) * grad * grad
        )
        state.first[name], state.second[name] = first, second
        update = lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)
        trainable[name].values -= update
    return state


# Histories


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    tf_prob: float
    horizon: int
    seconds: float


@dataclasses.dataclass
class TrainHistory:
    """
    Per-epoch fine-tuning records, the best epoch and the time spent pretraining.
    """

    records: List[EpochRecord] = dataclasses.field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    pretrain_seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best_val_rmse(self) -> Optional[float]:
        if self.best_epoch is None:
            return None
        return self.records[self.best_epoch].val_rmse

    def seconds_per_epoch(self) -> float:
        """
        Mean wall time per fine-tuning epoch, with pretraining time spread over those epochs.
        """

        if not self.records:
            return 0.0
        total = sum(r.seconds for r in self.records) + self.pretrain_seconds
        return total / len(self.records)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as csv_file:
            writer = csv.writer(csv_file)
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.train_loss), repr(r.val_rmse), repr(r.tf_prob), r.horizon, f"{r.seconds:.6f}"]
                )

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> TrainHistory:
        with open(path, newline="") as csv_file:
            reader = csv.DictReader(csv_file)
            if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
                raise DynastyDataError(
                    f"'{path}' does not have the history columns: {', '.join(HISTORY_COLUMNS)}"
                )
            records = [
                EpochRecord(
                    epoch=int(row["epoch"]),
                    train_loss=float(row["train_loss"]),
                    val_rmse=float(row["val_rmse"]),
                    tf_prob=float(row["tf_prob"]),
                    horizon=int(row["horizon"]),
                    seconds=float(row["seconds"]),
                )
                for row in reader
            ]
        history = cls(records)
        if records:
            history.best_epoch = int(np.argmin([r.val_rmse for r in records]))
        return history


@dataclasses.dataclass
class PretrainHistory:
    losses: List[float] = dataclasses.field(default_factory=list)
    seconds: List[float] = dataclasses.field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return sum(self.seconds)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as csv_file:
            writer = csv.writer(csv_file)
            writer.writerow(PRETRAIN_COLUMNS)
            for epoch, (loss, seconds) in enumerate(zip(self.losses, self.seconds)):
                writer.writerow([epoch, repr(loss), f"{seconds:.6f}"])


# Loops


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose])


def iterate_batches(
    dataset: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    Yield `(X, A, Y)` mini-batches, shuffled when `rng` is given.
    """

    order = np.arange(len(dataset)) if rng is None else rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        yield dataset.arrays(order[start : start + batch_size].tolist())


def _require_normalized(dataset: Dataset, role: str) -> None:
    if dataset.norm_stats is None:
        raise DynastyContractError(f"The {role} dataset must be normalised first.")


def _optimise(
    model: ForecasterBase, state: OptimizerState, cfg: TrainConfig, lr: float
) -> None:
    if cfg.grad_clip_norm is not None:
        clip_gradients(model.params, cfg.grad_clip_norm)
    adam_step(model.params, None, state, lr)


def run_pretraining(
    model: ForecasterBase, dataset: Dataset, cfg: TrainConfig
) -> Tuple[ForecasterBase, PretrainHistory]:
    """
    Masked-reconstruction pretraining for `cfg.pretrain_epochs` epochs.

    Every sample draws its own mask per epoch; the model reconstructs `X * (1 - M)` and is
    updated with Adam on the masked loss.

    Raises:
        DynastyConfigError: If the dataset is empty.
        DynastyContractError: If the model has no reconstruction head or the data is not normalised.
    """

    if not len(dataset):
        raise DynastyConfigError("Cannot pretrain on an empty dataset.")
    if not model.supports_pretraining:
        raise DynastyContractError(f"Model kind '{model.kind}' does not support pretraining.")
    _require_normalized(dataset, "pretraining")
    model.check_nodes(dataset.num_nodes)
    model.num_nodes = dataset.num_nodes

    history = PretrainHistory()
    rng = _stream(cfg.seed, PRETRAIN_STREAM)
    state = OptimizerState()
    N, D, L, _ = dataset.dims

    for epoch in range(cfg.pretrain_epochs):
        start = time.perf_counter()
        lr = learning_rate_at(epoch, cfg.pretrain_epochs, cfg)
        losses = []
        for X, A, _ in iterate_batches(dataset, cfg.batch_size, rng):
            M = np.stack([sample_mask(N, D, L, cfg.mask_prob, rng) for _ in range(X.shape[0])])
            model.params.zero_grad()
            with T.Tape() as tape:
                X_hat = model.reconstruct(X * (1.0 - M), A, train=True, rng=rng)
                loss = masked_pretrain_loss(X_hat, X, M, cfg.epsilon)
                tape.backward(loss)
            _optimise(model, state, cfg, lr)
            losses.append(loss.item())

        history.losses.append(float(np.mean(losses)))
        history.seconds.append(time.perf_counter() - start)
        logger.info("Pretrain epoch %d: loss %.6f, lr %.2e", epoch, history.losses[-1], lr)
    return model, history


def predict_dataset(model: ForecasterBase, dataset: Dataset, batch_size: int = 32) -> np.ndarray:
    """
    Free-running evaluation-mode forecasts `[S, N, D, H]` for every sample, in dataset order.

    Batches may run on up to `DYNASTY_THREADS` workers; results are joined in batch order.
    """

    model.check_nodes(dataset.num_nodes)
    starts = list(range(0, len(dataset), batch_size))

    def run(start: int) -> np.ndarray:
        X, A, _ = dataset.arrays(range(start, min(start + batch_size, len(dataset))))
        return model.predict(X, A)

    workers = min(worker_count(), len(starts))
    if workers <= 1:
        parts = [run(start) for start in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(run, starts))
    return np.concatenate(parts)


def validation_rmse(model: ForecasterBase, dataset: Dataset) -> float:
    """
    RMSE over the full horizon, in raw units.
    """

    _require_normalized(dataset, "validation")
    stats = dataset.norm_stats
    _, _, Y = dataset.arrays()
    prediction = stats.invert(predict_dataset(model, dataset))  # type: ignore
    error = prediction - stats.invert(Y)  # type: ignore
    return float(np.sqrt(np.mean(error * error)))


def run_training(
    model: ForecasterBase,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    pretrain_seconds: float = 0.0,
) -> Tuple[ForecasterBase, TrainHistory]:
    """
    Fine-tune with scheduled sampling and a growing horizon, keeping the best validation snapshot.

    Each epoch supervises the first `H_a` steps (see `curriculum_horizon`) with `total_loss`,
    decoding in scheduled mode with teacher-forcing probability `teacher_forcing_prob(epoch)`.
    Validation RMSE always uses the full horizon, denormalised. Training stops after
    `early_stop_patience` epochs without improvement, and the best parameters are restored.

    Args:
        model: Model to train in place.
        train: Normalised training split.
        val: Validation split normalised with the same statistics.
        cfg: Training settings.
        pretrain_seconds: Pretraining wall time, kept in the history for runtime accounting.

    Returns:
        The model (holding its best parameters) and the history.

    Raises:
        DynastyConfigError: If a split is empty or the splits were normalised differently.
    """

    history = TrainHistory(pretrain_seconds=pretrain_seconds)
    if not len(train) or not len(val):
        raise DynastyConfigError("Training needs non-empty training and validation splits.")
    _require_normalized(train, "training")
    if not train.norm_stats.matches(val.norm_stats):  # type: ignore
        raise DynastyConfigError(
            "The training and validation splits were normalised with different statistics."
        )
    H = model.config.horizon
    if train.horizon != H or val.horizon != H:
        raise DynastyConfigError(
            f"The model forecasts H={H} steps but the data has H={train.horizon}."
        )
    cfg.check_horizon(H)
    model.check_nodes(train.num_nodes)
    model.num_nodes = train.num_nodes
    if cfg.max_epochs == 0:
        return model, history

    rng = _stream(cfg.seed, TRAIN_STREAM)
    state = OptimizerState()
    best_rmse, best_snapshot, waited = math.inf, model.params.snapshot(), 0

    for epoch in range(cfg.max_epochs):
        start = time.perf_counter()
        horizon = curriculum_horizon(epoch, cfg, H)
        tf_prob = teacher_forcing_prob(epoch, cfg.sampling_decay_epochs)
        lr = learning_rate_at(epoch, cfg.max_epochs, cfg)

        losses = []
        for X, A, Y in iterate_batches(train, cfg.batch_size, rng):
            mode = ForecastMode.scheduled(Y, tf_prob, cfg.mix_alpha, rng)
            model.params.zero_grad()
            with T.Tape() as tape:
                Y_pred = model.forecast(X, A, mode=mode, train=True, rng=rng, horizon=horizon)
                loss = total_loss(Y_pred, Y[..., :horizon], cfg.lambda_var, cfg.horizon_decay)
                tape.backward(loss)
            _optimise(model, state, cfg, lr)
            losses.append(loss.item())

        val_rmse = validation_rmse(model, val)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_rmse=val_rmse,
                tf_prob=tf_prob,
                horizon=horizon,
                seconds=time.perf_counter() - start,
            )
        )
        logger.info(
            "Epoch %d: loss %.6f, val RMSE %.6f, tf-prob %.3f, horizon %d, lr %.2e",
            epoch,
            history.records[-1].train_loss,
            val_rmse,
            tf_prob,
            horizon,
            lr,
        )

        if val_rmse < best_rmse:
            best_rmse, best_snapshot, waited = val_rmse, model.params.snapshot(), 0
            history.best_epoch = epoch
        else:
            waited += 1
            if cfg.early_stop_patience is not None and waited >= cfg.early_stop_patience:
                history.stopped_early = True
                logger.info("Stopping early after epoch %d (best epoch %d).", epoch, history.best_epoch)
                break

    model.params.restore(best_snapshot)
    return model, history
