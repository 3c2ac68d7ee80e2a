"""
The edge-biased graph forecaster and its graph-blind recurrent baseline.

Every public operation accepts either a single sample in the `[N, D, L]` / `[N, N, L]`
layout, or a mini-batch with a leading batch axis. Internally the encoder runs time-major,
on hidden states of shape `[B, L, N, d]`, so the per-step spatial attention is a batched
matmul over `(B, L)`.

```python
from dynasty.config import ModelConfig
from dynasty.model import DynastyModel, ForecastMode

model = DynastyModel(ModelConfig(feature_dim=1, hidden_dim=16, num_heads=2, num_layers=1))
y = model.forecast(X_hist, A_hist)  # [N, D, H]
```
"""
from __future__ import annotations
import enum
import math
import logging
import dataclasses
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Type, Union
import numpy as np
from . import tensor as T
from .tensor import Tensor
from .config import ModelConfig
from .storage import read_bundle, write_bundle
from .exceptions import (
    DynastyConfigError,
    DynastyContractError,
    DynastyDataError,
    DynastyDimensionError,
)


logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
PE_INIT_SCALE = 0.02
GRU_GATES = ("update", "reset", "candidate")
CHECKPOINT_FORMAT = "dynasty-checkpoint"


class ModelParameters:
    """
    Named learnable tensors of a model, kept in creation order.
    """

    __slots__ = "tensors"

    def __init__(self, tensors: Dict[str, Tensor]) -> None:
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise DynastyContractError(f"Unknown parameter '{name}'.") from None

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        """
        Total number of scalar weights.
        """

        return sum(t.size for t in self.tensors.values())

    def trainable(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            if t.requires_grad:
                t.zero_grad()
            else:
                t.grad = None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.tensors.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        """
        Copy values from a snapshot into the existing tensors, keeping their identity.

        Raises:
            DynastyContractError: If the snapshot names or shapes disagree with these parameters.
        """

        if set(snapshot) != set(self.tensors):
            missing = sorted(set(self.tensors) - set(snapshot))
            extra = sorted(set(snapshot) - set(self.tensors))
            raise DynastyContractError(
                f"Parameter snapshot does not match the model. Missing: {missing}. Unexpected: {extra}."
            )
        for name, t in self.tensors.items():
            values = np.asarray(snapshot[name], dtype=np.float64)
            if values.shape != t.shape:
                raise DynastyContractError(
                    f"Parameter '{name}' has shape {list(t.shape)} but the snapshot holds {list(values.shape)}."
                )
            t.values[...] = values

    def freeze(self, names: List[str]) -> None:
        for name in names:
            t = self[name]
            t.requires_grad = False
            t.grad = None


# Initialisation


class _ParameterBuilder:
    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.tensors: Dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> None:
        self.tensors[name] = Tensor(values, requires_grad=True, name=name)

    def uniform(self, name: str, shape: Tuple[int, ...], fan_in: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def linear(self, prefix: str, fan_in: int, fan_out: int) -> None:
        self.uniform(f"{prefix}.weight", (fan_in, fan_out), fan_in)
        self.uniform(f"{prefix}.bias", (fan_out,), fan_in)

    def layer_norm(self, prefix: str, dim: int) -> None:
        self.add(f"{prefix}.gain", np.ones(dim))
        self.add(f"{prefix}.offset", np.zeros(dim))

    def attention(self, prefix: str, dim: int) -> None:
        for projection in ("query", "key", "value", "output"):
            self.linear(f"{prefix}.{projection}", dim, dim)

    def gru(self, prefix: str, dim: int) -> None:
        for gate in GRU_GATES:
            self.uniform(f"{prefix}.{gate}.input", (dim, dim), dim)
            self.uniform(f"{prefix}.{gate}.hidden", (dim, dim), dim)
            self.uniform(f"{prefix}.{gate}.bias", (dim,), dim)

    def head(self, prefix: str, dim: int, out_dim: int) -> None:
        self.linear(f"{prefix}.0", dim, dim)
        self.linear(f"{prefix}.1", dim, out_dim)


def _edge_bias_prefixes(config: ModelConfig, layer: int) -> List[str]:
    hidden = [f"layers.{layer}.edge_bias.{k}" for k in range(config.bias_mlp_layers)]
    return hidden + [f"layers.{layer}.edge_bias.out"]


def init_parameters(
    config: ModelConfig, rng: Optional[np.random.Generator] = None
) -> ModelParameters:
    """
    Initialise forecaster weights.

    Projections are uniform in `±1/sqrt(fan_in)`, the positional-encoding table is standard
    normal scaled by 0.02, and layer-norm gains/offsets start at one/zero.

    Args:
        config: Architecture settings.
        rng: Random generator. Defaults to one seeded with `config.init_seed`.

    Returns:
        The parameters, all with `requires_grad` set.
    """

    builder = _ParameterBuilder(rng or np.random.default_rng(config.init_seed))
    d = config.hidden_dim

    builder.linear("input", config.feature_dim, d)
    builder.add("pe_time", PE_INIT_SCALE * builder.rng.standard_normal((config.max_history_len, d)))

    for i in range(config.num_layers):
        builder.attention(f"layers.{i}", d)
        fan_in = 1
        for prefix in _edge_bias_prefixes(config, i)[:-1]:
            builder.linear(prefix, fan_in, config.bias_mlp_hidden)
            fan_in = config.bias_mlp_hidden
        builder.linear(f"layers.{i}.edge_bias.out", fan_in, config.num_heads)
        builder.layer_norm(f"layers.{i}.norm1", d)
        builder.linear(f"layers.{i}.ffn.0", d, 4 * d)
        builder.linear(f"layers.{i}.ffn.1", 4 * d, d)
        builder.layer_norm(f"layers.{i}.norm2", d)

    if config.temporal_attention:
        builder.attention("temporal", d)
        builder.layer_norm("temporal.norm", d)

    builder.gru("encoder_gru", d)
    builder.gru("decoder_gru", d)
    builder.head("forecast_head", d, config.feature_dim)
    if not config.tie_reconstruction_head:
        builder.head("reconstruction_head", d, config.feature_dim)

    return ModelParameters(builder.tensors)


def init_baseline_parameters(
    config: ModelConfig, rng: Optional[np.random.Generator] = None
) -> ModelParameters:
    """
    Initialise the per-node recurrent baseline: input projection, two GRUs and the forecast head.
    """

    builder = _ParameterBuilder(rng or np.random.default_rng(config.init_seed))
    d = config.hidden_dim
    builder.linear("input", config.feature_dim, d)
    builder.gru("encoder_gru", d)
    builder.gru("decoder_gru", d)
    builder.head("forecast_head", d, config.feature_dim)
    return ModelParameters(builder.tensors)


def parameter_count(config: ModelConfig) -> int:
    return init_parameters(config).count()


# Building blocks


def _linear(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]


def _head(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    return _linear(T.relu(_linear(x, params, f"{prefix}.0")), params, f"{prefix}.1")


def _layer_norm(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    # Statistics are taken with the feature axis moved to the front, so every
    # broadcast stays over leading axes.
    n = x.ndim
    features_first = T.transpose(x, [n - 1] + list(range(n - 1)))
    centred = features_first - T.reduce_mean(features_first, axis=0)
    std = T.sqrt(T.reduce_mean(T.square(centred), axis=0) + LAYER_NORM_EPS)
    normed = T.transpose(centred / std, list(range(1, n)) + [0])
    return normed * params[f"{prefix}.gain"] + params[f"{prefix}.offset"]


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    lead, (steps, dim) = x.shape[:-2], x.shape[-2:]
    n = len(lead)
    split = T.reshape(x, lead + (steps, num_heads, dim // num_heads))
    return T.transpose(split, list(range(n)) + [n + 1, n, n + 2])


def _merge_heads(x: Tensor) -> Tensor:
    lead, (heads, steps, head_dim) = x.shape[:-3], x.shape[-3:]
    n = len(lead)
    merged = T.transpose(x, list(range(n)) + [n + 1, n, n + 2])
    return T.reshape(merged, lead + (steps, heads * head_dim))


def _self_attention(
    x: Tensor,
    params: ModelParameters,
    prefix: str,
    num_heads: int,
    bias: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Multi-head self-attention over axis -2 of `x` (`[..., S, d]`).

    Returns:
        The output-projected context `[..., S, d]` and the attention weights `[..., h, S, S]`.
    """

    q = _split_heads(_linear(x, params, f"{prefix}.query"), num_heads)
    k = _split_heads(_linear(x, params, f"{prefix}.key"), num_heads)
    v = _split_heads(_linear(x, params, f"{prefix}.value"), num_heads)
    scores = (q @ T.transpose(k)) * (1.0 / math.sqrt(x.shape[-1] // num_heads))
    if bias is not None:
        scores = scores + bias
    attention = T.softmax(scores, axis=-1)
    context = _merge_heads(attention @ v)
    return _linear(context, params, f"{prefix}.output"), attention


def _edge_bias(
    A: np.ndarray, params: ModelParameters, config: ModelConfig, layer: int
) -> Tensor:
    # [..., N, N] -> per-entry MLP -> [..., N, N, h] -> [..., h, N, N]
    x = Tensor(A[..., None])
    prefixes = _edge_bias_prefixes(config, layer)
    for prefix in prefixes[:-1]:
        x = T.relu(_linear(x, params, prefix))
    x = _linear(x, params, prefixes[-1])
    n = A.ndim - 2
    return T.transpose(x, list(range(n)) + [n + 2, n, n + 1])


def _drop_edges(
    A: np.ndarray, config: ModelConfig, train: bool, rng: Optional[np.random.Generator]
) -> np.ndarray:
    if not train or config.edge_dropout_rate == 0.0:
        return A
    if rng is None:
        raise DynastyConfigError("Edge dropout requires an 'rng' at train time.")
    return A * (rng.random(A.shape) >= config.edge_dropout_rate)


def _spatial_layer(
    Z: Tensor,
    A: np.ndarray,
    params: ModelParameters,
    config: ModelConfig,
    layer: int,
    train: bool,
    rng: Optional[np.random.Generator],
) -> Tuple[Tensor, Tensor]:
    prefix = f"layers.{layer}"
    bias = _edge_bias(_drop_edges(A, config, train, rng), params, config, layer)
    attended, attention = _self_attention(Z, params, prefix, config.num_heads, bias)
    x = _layer_norm(Z + attended, params, f"{prefix}.norm1")
    hidden = T.relu(_linear(x, params, f"{prefix}.ffn.0"))
    x = _layer_norm(x + _linear(hidden, params, f"{prefix}.ffn.1"), params, f"{prefix}.norm2")
    return x, attention


def _temporal_block(
    x: Tensor, params: ModelParameters, config: ModelConfig
) -> Tuple[Tensor, Tensor]:
    # x: [..., N, L, d], attention runs over L within each node.
    attended, attention = _self_attention(x, params, "temporal", config.num_heads)
    return _layer_norm(x + attended, params, "temporal.norm"), attention


def _embed(X: np.ndarray, params: ModelParameters, config: ModelConfig) -> Tensor:
    # X: [B, N, D, L] -> Z: [B, L, N, d]
    steps = X.shape[-1]
    frames = Tensor(np.transpose(X, (0, 1, 3, 2)))
    pe = T.slice_axis(params["pe_time"], 0, 0, steps)
    return T.transpose(_linear(frames, params, "input") + pe, (0, 2, 1, 3))


def _encode(
    X: np.ndarray,
    A: np.ndarray,
    params: ModelParameters,
    config: ModelConfig,
    train: bool,
    rng: Optional[np.random.Generator],
    attention: Optional[List[Tensor]] = None,
) -> Tensor:
    # X: [B, N, D, L], A: [B, N, N, L] -> Z: [B, L, N, d]
    Z = _embed(X, params, config)
    if train and config.feature_dropout_rate > 0:
        Z = T.dropout(Z, config.feature_dropout_rate, rng=rng, train=True)

    A_steps = np.transpose(A, (0, 3, 1, 2))
    for i in range(config.num_layers):
        Z, weights = _spatial_layer(Z, A_steps, params, config, i, train, rng)
        if attention is not None:
            attention.append(weights)

    if config.temporal_attention:
        per_node, weights = _temporal_block(T.transpose(Z, (0, 2, 1, 3)), params, config)
        Z = T.transpose(per_node, (0, 2, 1, 3))
        if attention is not None:
            attention.append(weights)
    return Z


def _gru_cell(x: Tensor, h: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    def gate(name: str, hidden: Tensor) -> Tensor:
        return (
            x @ params[f"{prefix}.{name}.input"]
            + hidden @ params[f"{prefix}.{name}.hidden"]
            + params[f"{prefix}.{name}.bias"]
        )

    z = T.sigmoid(gate("update", h))
    r = T.sigmoid(gate("reset", h))
    n = T.tanh(gate("candidate", r * h))
    return n + z * (h - n)


def _summarize(Z: Tensor, params: ModelParameters) -> Tensor:
    # Z: [..., L, N, d] -> h: [..., N, d]
    steps = Z.shape[-3]
    h = Tensor(np.zeros(Z.shape[:-3] + Z.shape[-2:]))
    for t in range(steps):
        h = _gru_cell(T.take(Z, -3, t), h, params, "encoder_gru")
    return h


def _decode_step(h: Tensor, x_in: Tensor, params: ModelParameters) -> Tuple[Tensor, Tensor]:
    h = _gru_cell(_linear(x_in, params, "input"), h, params, "decoder_gru")
    return _head(h, params, "forecast_head"), h


# Input plumbing


def _values(x: Union[Tensor, np.ndarray, Any]) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _batch_features(X_hist: Any, config: ModelConfig, operation: str) -> Tuple[np.ndarray, bool]:
    X = _values(X_hist)
    if X.ndim not in (3, 4):
        raise DynastyDimensionError(
            f"Operation '{operation}' expects X_hist of shape [N, D, L] or [B, N, D, L]. Received: {list(X.shape)}"
        )
    batched = X.ndim == 4
    X = X if batched else X[None]
    if X.shape[2] != config.feature_dim:
        raise DynastyDimensionError(
            f"Operation '{operation}' received X_hist with D={X.shape[2]} but the model has feature_dim={config.feature_dim}."
        )
    if X.shape[3] > config.max_history_len:
        raise DynastyDimensionError(
            f"Operation '{operation}' received L={X.shape[3]} history steps but the positional table holds {config.max_history_len}."
        )
    return X, batched


def _batch_inputs(
    X_hist: Any, A_hist: Any, config: ModelConfig, operation: str
) -> Tuple[np.ndarray, np.ndarray, bool]:
    X, batched = _batch_features(X_hist, config, operation)
    A = _values(A_hist)
    A = A if A.ndim == 4 else A[None]
    B, N, _, L = X.shape
    if A.ndim != 4 or A.shape[0] != B or A.shape[1] != N or A.shape[2] != N:
        raise DynastyDimensionError(
            f"Operation '{operation}' cannot pair X_hist of shape {list(X.shape)} with A_hist of shape {list(A.shape)}: node counts differ."
        )
    if A.shape[3] != L:
        raise DynastyDimensionError(
            f"Operation '{operation}' received X_hist with L={L} but A_hist with L={A.shape[3]}."
        )
    if not np.all(np.isfinite(A)):
        raise DynastyDataError(f"Operation '{operation}' received non-finite adjacency entries.")
    return X, A, batched


def _unbatch(x: Tensor, batched: bool) -> Tensor:
    return x if batched else T.reshape(x, x.shape[1:])


# Public operations


def embed_inputs(X_hist: Any, params: ModelParameters, config: ModelConfig) -> Tensor:
    """
    Project features to the hidden size and add the learned positional encoding of each step.

    Args:
        X_hist: Node features `[N, D, L]` (or batched).
        params: Model parameters.
        config: Architecture settings.

    Returns:
        Embeddings `[N, d, L]`, with `Z[:, :, t] = X_hist[:, :, t] @ W + b + PE_time[t]`.
    """

    X, batched = _batch_features(X_hist, config, "embed_inputs")
    Z = _embed(X, params, config)
    return _unbatch(T.transpose(Z, (0, 2, 3, 1)), batched)


def edge_bias(
    A_t: Any, params: ModelParameters, config: ModelConfig, layer: int = 0
) -> Tensor:
    """
    Per-head attention bias computed entrywise from an adjacency matrix.

    Args:
        A_t: Adjacency `[N, N]`, optionally with leading batch axes.
        params: Model parameters.
        config: Architecture settings.
        layer: Index of the attention layer whose bias MLP is used.

    Returns:
        Bias `[h, N, N]` where `B[k, i, j]` is output `k` of the MLP applied to `A_t[i, j]`.
    """

    A = _values(A_t)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DynastyDimensionError(
            f"Operation 'edge_bias' expects a square adjacency. Received: {list(A.shape)}"
        )
    return _edge_bias(A, params, config, layer)


def spatial_attention_layer(
    Z_t: Union[Tensor, np.ndarray],
    A_t: Any,
    params: ModelParameters,
    config: ModelConfig,
    layer: int = 0,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    return_attention: bool = False,
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """
    One edge-biased, post-norm transformer layer over the nodes of a single time step.

    Per head `k`, the logits are `Q K^T / sqrt(d/h) + B[k]`, with the bias computed from `A_t`
    after edge dropout (train only, no rescaling). The attended output is projected, added
    residually and normalised, then passed through a residual `d -> 4d -> d` block and a
    second normalisation.

    Args:
        Z_t: Node states `[N, d]` (or with leading batch axes).
        A_t: Adjacency `[N, N]` with the same leading axes as `Z_t`.
        params: Model parameters.
        config: Architecture settings.
        layer: Layer index.
        train: Apply edge dropout.
        rng: Random generator, required for edge dropout.
        return_attention: Also return the attention weights `[h, N, N]`.

    Returns:
        Updated node states `[N, d]`, and the attention weights if requested.
    """

    Z = Tensor.wrap(Z_t)
    A = _values(A_t)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2] or Z.shape[:-1] != A.shape[:-1]:
        raise DynastyDimensionError(
            f"Operation 'spatial_attention_layer' cannot pair Z_t of shape {list(Z.shape)} with A_t of shape {list(A.shape)}."
        )
    if Z.shape[-1] != config.hidden_dim:
        raise DynastyDimensionError(
            f"Operation 'spatial_attention_layer' received states of width {Z.shape[-1]} but hidden_dim={config.hidden_dim}."
        )
    out, attention = _spatial_layer(Z, A, params, config, layer, train, rng)
    return (out, attention) if return_attention else out


def temporal_self_attention(
    Zs: Union[Tensor, np.ndarray],
    params: ModelParameters,
    config: ModelConfig,
    return_attention: bool = False,
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """
    Multi-head self-attention across time within each node, with residual and layer norm.

    Args:
        Zs: Node states `[N, d, L]` (or batched).
        params: Model parameters.
        config: Architecture settings, with `temporal_attention` enabled.
        return_attention: Also return the attention weights `[N, h, L, L]`.

    Returns:
        Updated node states `[N, d, L]`, and the attention weights if requested.
    """

    if not config.temporal_attention:
        raise DynastyConfigError("Temporal self-attention is disabled in this model config.")
    Z = Tensor.wrap(Zs)
    if Z.ndim < 3 or Z.shape[-2] != config.hidden_dim:
        raise DynastyDimensionError(
            f"Operation 'temporal_self_attention' expects states [N, {config.hidden_dim}, L]. Received: {list(Z.shape)}"
        )
    swap = list(range(Z.ndim - 2)) + [Z.ndim - 1, Z.ndim - 2]
    out, attention = _temporal_block(T.transpose(Z, swap), params, config)
    out = T.transpose(out, swap)
    return (out, attention) if return_attention else out


def encode(
    X_hist: Any,
    A_hist: Any,
    params: ModelParameters,
    config: ModelConfig,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    return_attention: bool = False,
) -> Union[Tensor, Tuple[Tensor, List[Tensor]]]:
    """
    Embed the history, run the spatial stack on each step's own graph and, if enabled, temporal attention.

    Args:
        X_hist: Node features `[N, D, L]` (or batched).
        A_hist: Adjacency sequence `[N, N, L]` (or batched).
        params: Model parameters.
        config: Architecture settings.
        train: Apply feature and edge dropout.
        rng: Random generator for dropout.
        return_attention: Also return every layer's attention weights, in layer order.

    Returns:
        Encoded states `[N, d, L]`.

    Raises:
        DynastyDimensionError: If the node counts or history lengths of `X_hist` and `A_hist` differ.
    """

    X, A, batched = _batch_inputs(X_hist, A_hist, config, "encode")
    attention: List[Tensor] = []
    Z = _encode(X, A, params, config, train, rng, attention)
    out = _unbatch(T.transpose(Z, (0, 2, 3, 1)), batched)
    if return_attention:
        return out, [_unbatch(weights, batched) for weights in attention]
    return out


def summarize_history(Z_enc: Union[Tensor, np.ndarray], params: ModelParameters) -> Tensor:
    """
    Run the encoder GRU over the encoded history from a zero state.

    Args:
        Z_enc: Encoded states `[N, d, L]` (or batched).
        params: Model parameters.

    Returns:
        The final hidden state `[N, d]`.
    """

    Z = Tensor.wrap(Z_enc)
    n = Z.ndim
    time_major = T.transpose(Z, list(range(n - 3)) + [n - 1, n - 3, n - 2])
    return _summarize(time_major, params)


def decode_step(
    h_prev: Union[Tensor, np.ndarray], x_in: Union[Tensor, np.ndarray], params: ModelParameters
) -> Tuple[Tensor, Tensor]:
    """
    One decoder step: project the input frame with the shared input projection, advance the decoder GRU, apply the forecast head.

    Returns:
        The predicted frame `[N, D]` and the new hidden state `[N, d]`.
    """

    return _decode_step(Tensor.wrap(h_prev), Tensor.wrap(x_in), params)


class DecoderInput(enum.Enum):
    FREE_RUNNING = "free-running"
    TEACHER_FORCED = "teacher-forced"
    SCHEDULED = "scheduled"


@dataclasses.dataclass
class ForecastMode:
    """
    What the decoder consumes after its first step.

    - `free-running`: its own previous prediction.
    - `teacher-forced`: the previous true frame from `targets`.
    - `scheduled`: per step and per batch element, with probability `prob` the mix
      `alpha * truth + (1 - alpha) * prediction`, otherwise the prediction.
    """

    kind: DecoderInput = DecoderInput.FREE_RUNNING
    targets: Optional[np.ndarray] = None
    prob: float = 0.0
    alpha: float = 0.5
    rng: Optional[np.random.Generator] = None

    def __post_init__(self) -> None:
        for name in ("prob", "alpha"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DynastyConfigError(f"Forecast mode '{name}' must lie in [0, 1]. Received: {value!r}")
        if self.targets is not None:
            self.targets = _values(self.targets)

    @classmethod
    def free_running(cls) -> ForecastMode:
        return cls()

    @classmethod
    def teacher_forced(cls, targets: Any) -> ForecastMode:
        return cls(kind=DecoderInput.TEACHER_FORCED, targets=targets)

    @classmethod
    def scheduled(
        cls, targets: Any, prob: float, alpha: float, rng: np.random.Generator
    ) -> ForecastMode:
        return cls(kind=DecoderInput.SCHEDULED, targets=targets, prob=prob, alpha=alpha, rng=rng)


def _batch_targets(mode: ForecastMode, batch: int, nodes: int, features: int, horizon: int) -> Optional[np.ndarray]:
    if mode.kind == DecoderInput.FREE_RUNNING:
        return None
    if mode.targets is None:
        raise DynastyContractError(f"Decoding in '{mode.kind.value}' mode requires targets.")
    if mode.kind == DecoderInput.SCHEDULED and mode.rng is None:
        raise DynastyContractError("Decoding in 'scheduled' mode requires an 'rng'.")
    targets = mode.targets if mode.targets.ndim == 4 else mode.targets[None]
    if targets.ndim != 4 or targets.shape[:3] != (batch, nodes, features) or targets.shape[3] < horizon:
        raise DynastyDimensionError(
            f"Targets of shape {list(mode.targets.shape)} do not cover [{nodes}, {features}, {horizon}] for a batch of {batch}."
        )
    return targets


def _rollout(
    h: Tensor,
    last_frame: np.ndarray,
    params: ModelParameters,
    mode: ForecastMode,
    horizon: int,
) -> Tensor:
    # last_frame: [B, N, D]; returns [B, N, D, horizon]
    batch, nodes, features = last_frame.shape
    targets = _batch_targets(mode, batch, nodes, features, horizon)

    x_in = Tensor(last_frame)
    steps = []
    for t in range(horizon):
        y, h = _decode_step(h, x_in, params)
        steps.append(y)
        if t + 1 == horizon:
            break
        if mode.kind == DecoderInput.FREE_RUNNING:
            x_in = y
        elif mode.kind == DecoderInput.TEACHER_FORCED:
            x_in = Tensor(targets[..., t])
        else:
            coins = mode.rng.random(batch) < mode.prob
            if not coins.any():
                x_in = y
            else:
                weight = np.broadcast_to((coins * mode.alpha)[:, None, None], y.shape)
                x_in = y * Tensor(1.0 - weight) + Tensor(targets[..., t] * weight)
    return T.stack(steps, axis=-1)


def _check_horizon(config: ModelConfig, horizon: Optional[int]) -> int:
    horizon = config.horizon if horizon is None else horizon
    if not 1 <= horizon <= config.horizon:
        raise DynastyConfigError(
            f"Decoding horizon must lie in [1, {config.horizon}]. Received: {horizon!r}"
        )
    return horizon


def forecast(
    X_hist: Any,
    A_hist: Any,
    params: ModelParameters,
    config: ModelConfig,
    mode: Optional[ForecastMode] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    horizon: Optional[int] = None,
) -> Tensor:
    """
    Encode the history and decode `H` future frames autoregressively.

    The first decoder input is the last observed frame `X_hist[:, :, -1]`.

    Args:
        X_hist: Node features `[N, D, L]` (or batched).
        A_hist: Adjacency sequence `[N, N, L]` (or batched).
        params: Model parameters.
        config: Architecture settings.
        mode: Decoder input policy. Defaults to free-running.
        train: Apply dropout.
        rng: Random generator for dropout.
        horizon: Number of steps to decode. Defaults to `config.horizon`.

    Returns:
        Predictions `[N, D, H]`.

    Raises:
        DynastyContractError: If a teacher-forced or scheduled mode has no targets.
    """

    mode = mode or ForecastMode.free_running()
    horizon = _check_horizon(config, horizon)
    X, A, batched = _batch_inputs(X_hist, A_hist, config, "forecast")
    Z = _encode(X, A, params, config, train, rng)
    Y = _rollout(_summarize(Z, params), X[..., -1], params, mode, horizon)
    return _unbatch(Y, batched)


def reconstruct(
    X_masked: Any,
    A_hist: Any,
    params: ModelParameters,
    config: ModelConfig,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Reconstruct every history frame from the encoded (masked) history, without autoregression.

    Uses the forecast head when `config.tie_reconstruction_head` is set, else the separate reconstruction head.

    Returns:
        Reconstruction `[N, D, L]`.
    """

    X, A, batched = _batch_inputs(X_masked, A_hist, config, "reconstruct")
    Z = _encode(X, A, params, config, train, rng)
    prefix = "forecast_head" if config.tie_reconstruction_head else "reconstruction_head"
    return _unbatch(T.transpose(_head(Z, params, prefix), (0, 2, 3, 1)), batched)


# Models


class ForecasterBase:
    """
    Configuration, parameters and forecasting surface shared by every model kind.
    """

    kind = ""
    uses_graph = True
    supports_pretraining = False

    def __init__(
        self,
        config: ModelConfig,
        params: Optional[ModelParameters] = None,
        num_nodes: Optional[int] = None,
    ) -> None:
        """
        Initialise a model.

        Args:
            config: Architecture settings.
            params: Existing parameters. Freshly initialised from `config.init_seed` if omitted.
            num_nodes: Node count of the data the model was fitted on, if known.
        """

        self.config = config
        self.params = params if params is not None else self.init_parameters(config)
        self.num_nodes = num_nodes
        logger.debug("Initialised %s model with %d weights.", self.kind, self.params.count())

    @classmethod
    def init_parameters(cls, config: ModelConfig) -> ModelParameters:
        raise NotImplementedError

    def parameters(self) -> ModelParameters:
        return self.params

    def forecast(
        self,
        X_hist: Any,
        A_hist: Any,
        mode: Optional[ForecastMode] = None,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        horizon: Optional[int] = None,
    ) -> Tensor:
        raise NotImplementedError

    def reconstruct(
        self,
        X_masked: Any,
        A_hist: Any,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        raise DynastyContractError(f"Model kind '{self.kind}' has no reconstruction head.")

    def predict(self, X_hist: Any, A_hist: Any) -> np.ndarray:
        """
        Free-running forecast in evaluation mode, as an array.
        """

        return self.forecast(X_hist, A_hist).numpy()

    def check_nodes(self, num_nodes: int) -> None:
        if self.num_nodes is not None and self.num_nodes != num_nodes:
            raise DynastyContractError(
                f"Model was fitted on N={self.num_nodes} nodes but the data has N={num_nodes} nodes."
            )

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(self, path)


class DynastyModel(ForecasterBase):
    """
    Edge-biased spatiotemporal transformer encoder with a GRU summariser and autoregressive GRU decoder.
    """

    kind = "dynasty"
    supports_pretraining = True

    @classmethod
    def init_parameters(cls, config: ModelConfig) -> ModelParameters:
        return init_parameters(config)

    def encode(
        self,
        X_hist: Any,
        A_hist: Any,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        return encode(X_hist, A_hist, self.params, self.config, train=train, rng=rng)  # type: ignore

    def forecast(self, X_hist, A_hist, mode=None, train=False, rng=None, horizon=None):
        return forecast(
            X_hist, A_hist, self.params, self.config, mode=mode, train=train, rng=rng, horizon=horizon
        )

    def reconstruct(self, X_masked, A_hist, train=False, rng=None):
        return reconstruct(X_masked, A_hist, self.params, self.config, train=train, rng=rng)

    def edge_bias_output_names(self) -> List[str]:
        return [
            f"layers.{i}.edge_bias.out.{part}"
            for i in range(self.config.num_layers)
            for part in ("weight", "bias")
        ]

    def disable_edge_bias(self) -> None:
        """
        Zero and freeze the output layer of every edge-bias MLP, cutting the graph out of the model.
        """

        names = self.edge_bias_output_names()
        for name in names:
            self.params[name].values[...] = 0.0
        self.params.freeze(names)


class RecurrentBaseline(ForecasterBase):
    """
    Graph-blind comparator: each node's history runs through the encoder GRU on its own, then the same decoder and head.

    The adjacency argument is accepted for interface compatibility and never read.
    """

    kind = "recurrent-baseline"
    uses_graph = False

    @classmethod
    def init_parameters(cls, config: ModelConfig) -> ModelParameters:
        return init_baseline_parameters(config)

    def forecast(self, X_hist, A_hist=None, mode=None, train=False, rng=None, horizon=None):
        mode = mode or ForecastMode.free_running()
        horizon = _check_horizon(self.config, horizon)
        X, batched = _batch_features(X_hist, self.config, "forecast")
        frames = Tensor(np.transpose(X, (0, 3, 1, 2)))
        h = _summarize(_linear(frames, self.params, "input"), self.params)
        Y = _rollout(h, X[..., -1], self.params, mode, horizon)
        return _unbatch(Y, batched)


MODEL_KINDS: Dict[str, Type[ForecasterBase]] = {
    DynastyModel.kind: DynastyModel,
    RecurrentBaseline.kind: RecurrentBaseline,
}


def save_checkpoint(model: ForecasterBase, path: Union[str, Path]) -> Path:
    """
    Write a model as a bundle: parameters in the blob, kind/config/frozen names in the manifest.
    """

    frozen = [name for name, t in model.params.items() if not t.requires_grad]
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_kind": model.kind,
        "config": model.config.to_dict(),
        "num_nodes": model.num_nodes,
        "frozen": frozen,
    }
    return write_bundle(path, model.params.snapshot(), meta)


def load_checkpoint(path: Union[str, Path]) -> ForecasterBase:
    """
    Read a model written by `save_checkpoint`. Parameter values round-trip bit-exactly.

    Raises:
        DynastyDataError: If the bundle is not a checkpoint.
        DynastyContractError: If its tensors do not match the stored config.
    """

    arrays, meta = read_bundle(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DynastyDataError(f"'{path}' is not a model checkpoint.")
    kind = meta.get("model_kind")
    model_class = MODEL_KINDS.get(kind)  # type: ignore
    if model_class is None:
        raise DynastyDataError(
            f"Unknown model kind '{kind}' in '{path}'. Expected one of: {', '.join(MODEL_KINDS)}"
        )
    model = model_class(ModelConfig.from_dict(meta["config"]), num_nodes=meta.get("num_nodes"))
    model.params.restore(arrays)
    model.params.freeze(meta.get("frozen", []))
    return model
