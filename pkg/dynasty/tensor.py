"""
Dense 64-bit tensors with a recorded forward pass and exact reverse-mode gradients.

Operations are recorded on the `Tape` that is active in the current context. A tape is
entered as a context manager around one forward pass, and `backward` replays it once in
reverse before clearing it:

```python
from dynasty import tensor as T

w = T.Tensor([[1.0, 2.0]], requires_grad=True)
with T.Tape() as tape:
    loss = T.reduce_sum(T.square(w))
    tape.backward(loss)

w.grad  # array([[2., 4.]])
```

Without an active tape nothing is recorded, which is how evaluation runs.
"""
from __future__ import annotations
import math
import contextvars
import dataclasses
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type, Union
import numpy as np
from .exceptions import (
    DynastyConfigError,
    DynastyContractError,
    DynastyDimensionError,
    DynastyNumericalError,
)


Shape = Tuple[int, ...]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "dynasty_active_tape", default=None
)


class Tensor:
    """
    Dense n-dimensional array of 64-bit floats that can take part in a recorded computation.
    """

    __slots__ = "values", "requires_grad", "grad", "name"

    def __init__(
        self,
        values: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        """
        Initialise a tensor.

        Args:
            values: Array-like of numbers. Always copied into a new float64 array.
            requires_grad: Whether gradients are accumulated into `grad` by `backward`.
            name: Optional label, used in error messages and gradient-check reports.
        """

        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def wrap(cls, value: ArrayLike) -> Tensor:
        """
        Return `value` unchanged if it is already a tensor, otherwise wrap it as a constant.
        """

        if isinstance(value, Tensor):
            return value
        return cls(value)

    @property
    def shape(self) -> Shape:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def item(self) -> float:
        if self.size != 1:
            raise DynastyContractError(
                f"Only single-element tensors convert to a float. Received shape: {list(self.shape)}"
            )
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={list(self.shape)} requires_grad={self.requires_grad}>"

    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return self.__mul__(other)

    def __truediv__(self, other: ArrayLike) -> Tensor:
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)


@dataclasses.dataclass
class TapeRecord:
    op: Type[Op]
    inputs: Tuple[Tensor, ...]
    output: Tensor
    attrs: Dict[str, Any]
    cache: Any


class Tape:
    """
    Ordered record of the operations of one forward pass.

    Only one tape may be active per context. Records are appended as operations execute, so
    every operand of a record was produced (or supplied) before it.
    """

    __slots__ = "records", "_token"

    def __init__(self) -> None:
        self.records: List[TapeRecord] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> Tape:
        if self._token is not None:
            raise DynastyContractError("This tape is already active.")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, type, value, traceback) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, record: TapeRecord) -> None:
        self.records.append(record)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        """
        Write `∂loss/∂x` into the `grad` of every tensor `x` with `requires_grad` that fed the loss.

        Gradients add onto an existing `grad`, so a tensor used several times (or across
        several backward passes without `zero_grad`) accumulates all contributions. The tape
        is cleared afterwards.

        Args:
            loss: Single-element tensor produced on this tape.

        Raises:
            DynastyContractError: If the loss has more than one element or the tape is empty.
            DynastyNumericalError: If any accumulated gradient is non-finite. No `grad` is modified then.
        """

        if loss.size != 1:
            raise DynastyContractError(
                f"Backward requires a scalar loss. Received shape: {list(loss.shape)}"
            )
        if not self.records:
            raise DynastyContractError("Backward requires a non-empty tape.")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        leaves: Dict[int, Tensor] = {id(loss): loss}

        for record in reversed(self.records):
            grad = grads.pop(id(record.output), None)
            leaves.pop(id(record.output), None)
            if grad is None:
                continue

            input_grads = record.op.backward(
                grad,
                [t.values for t in record.inputs],
                record.output.values,
                record.attrs,
                record.cache,
            )
            for tensor, input_grad in zip(record.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + input_grad
                else:
                    grads[key] = input_grad
                    leaves[key] = tensor

        updates = []
        for key, grad in grads.items():
            tensor = leaves[key]
            total = grad if tensor.grad is None else tensor.grad + grad
            _ensure_finite(total, "backward")
            updates.append((tensor, total))
        for tensor, total in updates:
            tensor.grad = total

        self.clear()


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """
    Run `Tape.backward` on the given tape, or the tape active in this context.
    """

    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise DynastyContractError("Backward requires an active tape.")
    tape.backward(loss)


def _ensure_finite(values: np.ndarray, kind: str) -> None:
    if not np.all(np.isfinite(values)):
        raise DynastyNumericalError(f"Operation '{kind}' produced non-finite values.")


# Shape helpers


def _is_suffix(short: Shape, long: Shape) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short) :]) == tuple(short)


def _broadcast_shape(kind: str, a: Shape, b: Shape) -> Shape:
    """
    Elementwise operands may differ only in leading (batch) axes.
    """

    if _is_suffix(b, a):
        return a
    if _is_suffix(a, b):
        return b
    raise DynastyDimensionError(
        f"Operation '{kind}' cannot combine shapes {list(a)} and {list(b)}."
    )


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _normalise_axis(kind: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DynastyDimensionError(
            f"Operation '{kind}' received axis {axis} for a tensor with {ndim} dimensions."
        )
    return axis % ndim


def _swap_last(values: np.ndarray) -> np.ndarray:
    return np.swapaxes(values, -1, -2)


# Operation registry


class Op:
    """
    Forward and backward rule of one op kind.
    """

    kind: str = ""
    arity: Optional[int] = 1

    @classmethod
    def check(cls, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
        pass

    @classmethod
    def forward(cls, values: List[np.ndarray], attrs: Dict[str, Any]) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    @classmethod
    def backward(
        cls,
        grad: np.ndarray,
        values: List[np.ndarray],
        out: np.ndarray,
        attrs: Dict[str, Any],
        cache: Any,
    ) -> List[Optional[np.ndarray]]:
        raise NotImplementedError


OPS: Dict[str, Type[Op]] = {}


def register(kind: str, arity: Optional[int] = 1) -> Callable[[Type[Op]], Type[Op]]:
    def decorator(op: Type[Op]) -> Type[Op]:
        op.kind = kind
        op.arity = arity
        OPS[kind] = op
        return op

    return decorator


def apply(kind: str, inputs: Sequence[ArrayLike], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """
    Apply an op kind to one or more tensors, recording it on the active tape when any input requires gradients.

    Args:
        kind: One of the registered op kinds, e.g. `matmul`, `softmax-over-axis`, `dropout`.
        inputs: Operand tensors. Non-tensor operands are wrapped as constants.
        attrs: Op attributes, e.g. `{"axis": -1}`.

    Returns:
        The output tensor.

    Raises:
        DynastyConfigError: If the kind is unknown.
        DynastyDimensionError: If the input shapes do not conform to the kind's rule.
        DynastyNumericalError: If the output contains NaN or Inf.
    """

    op = OPS.get(kind)
    if op is None:
        raise DynastyConfigError(
            f"Unknown op kind '{kind}'. Expected one of: {', '.join(sorted(OPS))}"
        )
    attrs = dict(attrs or {})
    tensors = tuple(Tensor.wrap(x) for x in inputs)
    if not tensors or (op.arity is not None and len(tensors) != op.arity):
        raise DynastyConfigError(
            f"Operation '{kind}' expects {op.arity if op.arity is not None else 'one or more'} inputs. Received: {len(tensors)}"
        )

    op.check([t.shape for t in tensors], attrs)
    with np.errstate(all="ignore"):
        out_values, cache = op.forward([t.values for t in tensors], attrs)
    _ensure_finite(out_values, kind)

    tape = _active_tape.get()
    track = tape is not None and any(t.requires_grad for t in tensors)
    output = Tensor.__new__(Tensor)
    output.values = np.asarray(out_values, dtype=np.float64)
    output.requires_grad = track
    output.grad = None
    output.name = None
    if track:
        tape.record(TapeRecord(op, tensors, output, attrs, cache))  # type: ignore
    return output


class _Elementwise(Op):
    @classmethod
    def check(cls, shapes, attrs):
        _broadcast_shape(cls.kind, shapes[0], shapes[1])


@register("add", arity=2)
class Add(_Elementwise):
    @classmethod
    def forward(cls, values, attrs):
        return values[0] + values[1], None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [_unbroadcast(grad, values[0].shape), _unbroadcast(grad, values[1].shape)]


@register("sub", arity=2)
class Sub(_Elementwise):
    @classmethod
    def forward(cls, values, attrs):
        return values[0] - values[1], None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [_unbroadcast(grad, values[0].shape), -_unbroadcast(grad, values[1].shape)]


@register("elementwise-mul", arity=2)
class Mul(_Elementwise):
    @classmethod
    def forward(cls, values, attrs):
        return values[0] * values[1], None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [
            _unbroadcast(grad * values[1], values[0].shape),
            _unbroadcast(grad * values[0], values[1].shape),
        ]


@register("div", arity=2)
class Div(_Elementwise):
    @classmethod
    def forward(cls, values, attrs):
        return values[0] / values[1], None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [
            _unbroadcast(grad / values[1], values[0].shape),
            _unbroadcast(-grad * out / values[1], values[1].shape),
        ]


@register("scalar-mul")
class ScalarMul(Op):
    @classmethod
    def check(cls, shapes, attrs):
        if "scalar" not in attrs:
            raise DynastyConfigError("Operation 'scalar-mul' requires a 'scalar' attribute.")

    @classmethod
    def forward(cls, values, attrs):
        return values[0] * float(attrs["scalar"]), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad * float(attrs["scalar"])]


@register("matmul", arity=2)
class MatMul(Op):
    @classmethod
    def check(cls, shapes, attrs):
        a, b = shapes
        if len(a) < 2 or len(b) < 2 or a[-1] != b[-2]:
            raise DynastyDimensionError(
                f"Operation 'matmul' cannot multiply shapes {list(a)} and {list(b)}."
            )
        if not (_is_suffix(a[:-2], b[:-2]) or _is_suffix(b[:-2], a[:-2])):
            raise DynastyDimensionError(
                f"Operation 'matmul' cannot broadcast batch axes of shapes {list(a)} and {list(b)}."
            )

    @classmethod
    def forward(cls, values, attrs):
        return np.matmul(values[0], values[1]), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        a, b = values
        return [
            _unbroadcast(np.matmul(grad, _swap_last(b)), a.shape),
            _unbroadcast(np.matmul(_swap_last(a), grad), b.shape),
        ]


@register("concat", arity=None)
class Concat(Op):
    @classmethod
    def check(cls, shapes, attrs):
        ndim = len(shapes[0])
        axis = _normalise_axis(cls.kind, attrs.get("axis", 0), ndim)
        for shape in shapes[1:]:
            if len(shape) != ndim or any(
                s != r for i, (s, r) in enumerate(zip(shape, shapes[0])) if i != axis
            ):
                raise DynastyDimensionError(
                    f"Operation 'concat' cannot join shapes {list(shapes[0])} and {list(shape)} on axis {axis}."
                )

    @classmethod
    def forward(cls, values, attrs):
        axis = attrs.get("axis", 0)
        return np.concatenate(values, axis=axis), [v.shape[axis] for v in values]

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        splits = np.cumsum(cache)[:-1]
        return list(np.split(grad, splits, axis=attrs.get("axis", 0)))


@register("slice")
class Slice(Op):
    @classmethod
    def check(cls, shapes, attrs):
        shape = shapes[0]
        axis = _normalise_axis(cls.kind, attrs.get("axis", 0), len(shape))
        start, stop = attrs.get("start", 0), attrs.get("stop", shape[axis])
        if not 0 <= start < stop <= shape[axis]:
            raise DynastyDimensionError(
                f"Operation 'slice' cannot take [{start}:{stop}] of axis {axis} in shape {list(shape)}."
            )

    @classmethod
    def _index(cls, ndim, attrs, stop_default):
        axis = attrs.get("axis", 0) % ndim
        index = [slice(None)] * ndim
        index[axis] = slice(attrs.get("start", 0), attrs.get("stop", stop_default))
        return tuple(index)

    @classmethod
    def forward(cls, values, attrs):
        x = values[0]
        axis = attrs.get("axis", 0) % x.ndim
        return x[cls._index(x.ndim, attrs, x.shape[axis])].copy(), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        x = values[0]
        axis = attrs.get("axis", 0) % x.ndim
        full = np.zeros_like(x)
        full[cls._index(x.ndim, attrs, x.shape[axis])] = grad
        return [full]


@register("reshape")
class Reshape(Op):
    @classmethod
    def check(cls, shapes, attrs):
        target = tuple(attrs.get("shape", ()))
        if any(s < 1 for s in target) or math.prod(target) != math.prod(shapes[0]):
            raise DynastyDimensionError(
                f"Operation 'reshape' cannot turn shape {list(shapes[0])} into {list(target)}."
            )

    @classmethod
    def forward(cls, values, attrs):
        return values[0].reshape(tuple(attrs["shape"])).copy(), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad.reshape(values[0].shape)]


@register("transpose")
class Transpose(Op):
    @classmethod
    def _axes(cls, ndim, attrs):
        axes = attrs.get("axes")
        if axes is None:
            axes = list(range(ndim - 2)) + [ndim - 1, ndim - 2]
        return tuple(axes)

    @classmethod
    def check(cls, shapes, attrs):
        ndim = len(shapes[0])
        if ndim < 2 and attrs.get("axes") is None:
            raise DynastyDimensionError(
                f"Operation 'transpose' needs at least two axes. Received shape: {list(shapes[0])}"
            )
        if sorted(cls._axes(ndim, attrs)) != list(range(ndim)):
            raise DynastyDimensionError(
                f"Operation 'transpose' received axes {list(cls._axes(ndim, attrs))} for shape {list(shapes[0])}."
            )

    @classmethod
    def forward(cls, values, attrs):
        return np.transpose(values[0], cls._axes(values[0].ndim, attrs)).copy(), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [np.transpose(grad, np.argsort(cls._axes(values[0].ndim, attrs)))]


@register("softmax-over-axis")
class Softmax(Op):
    @classmethod
    def check(cls, shapes, attrs):
        _normalise_axis(cls.kind, attrs.get("axis", -1), len(shapes[0]))

    @classmethod
    def forward(cls, values, attrs):
        axis = attrs.get("axis", -1)
        shifted = values[0] - values[0].max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=axis, keepdims=True), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        axis = attrs.get("axis", -1)
        return [out * (grad - (grad * out).sum(axis=axis, keepdims=True))]


@register("sigmoid")
class Sigmoid(Op):
    @classmethod
    def forward(cls, values, attrs):
        x = values[0]
        # Split by sign so neither branch overflows.
        out = np.empty_like(x)
        positive = x >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
        exp = np.exp(x[~positive])
        out[~positive] = exp / (1.0 + exp)
        return out, None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad * out * (1.0 - out)]


@register("tanh")
class Tanh(Op):
    @classmethod
    def forward(cls, values, attrs):
        return np.tanh(values[0]), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad * (1.0 - out * out)]


@register("relu")
class Relu(Op):
    @classmethod
    def forward(cls, values, attrs):
        return np.maximum(values[0], 0.0), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad * (values[0] > 0.0)]


@register("dropout")
class Dropout(Op):
    """
    Inverted dropout: kept entries are scaled by `1 / (1 - rate)` at train time, evaluation is identity.
    """

    @classmethod
    def check(cls, shapes, attrs):
        rate = attrs.get("rate", 0.0)
        if not 0.0 <= rate < 1.0:
            raise DynastyConfigError(f"Dropout rate must lie in [0, 1). Received: {rate!r}")
        mask = attrs.get("mask")
        if mask is not None and np.shape(mask) != shapes[0]:
            raise DynastyDimensionError(
                f"Operation 'dropout' received a mask of shape {list(np.shape(mask))} for shape {list(shapes[0])}."
            )
        if attrs.get("train", False) and mask is None and rate > 0 and attrs.get("rng") is None:
            raise DynastyConfigError("Operation 'dropout' requires an 'rng' at train time.")

    @classmethod
    def forward(cls, values, attrs):
        x = values[0]
        rate = attrs.get("rate", 0.0)
        if not attrs.get("train", False) or rate == 0.0:
            return x.copy(), None
        mask = attrs.get("mask")
        if mask is None:
            mask = attrs["rng"].random(x.shape) >= rate
        scale = np.asarray(mask, dtype=np.float64) / (1.0 - rate)
        return x * scale, scale

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad if cache is None else grad * cache]


class _Reduction(Op):
    @classmethod
    def check(cls, shapes, attrs):
        axis = attrs.get("axis")
        if axis is not None:
            _normalise_axis(cls.kind, axis, len(shapes[0]))

    @classmethod
    def _expand(cls, grad, shape, attrs):
        axis = attrs.get("axis")
        if axis is not None:
            grad = np.expand_dims(grad, axis % len(shape))
        return np.broadcast_to(grad, shape)


@register("sum-over-axis")
class Sum(_Reduction):
    @classmethod
    def forward(cls, values, attrs):
        return np.sum(values[0], axis=attrs.get("axis")), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [np.array(cls._expand(grad, values[0].shape, attrs))]


@register("mean-over-axis")
class Mean(_Reduction):
    @classmethod
    def forward(cls, values, attrs):
        return np.mean(values[0], axis=attrs.get("axis")), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        x = values[0]
        axis = attrs.get("axis")
        count = x.size if axis is None else x.shape[axis]
        return [np.array(cls._expand(grad / count, x.shape, attrs))]


@register("abs")
class Abs(Op):
    @classmethod
    def forward(cls, values, attrs):
        return np.abs(values[0]), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad * np.sign(values[0])]


@register("square")
class Square(Op):
    @classmethod
    def forward(cls, values, attrs):
        return values[0] * values[0], None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [2.0 * grad * values[0]]


@register("sqrt")
class Sqrt(Op):
    @classmethod
    def forward(cls, values, attrs):
        if np.any(values[0] < 0):
            raise DynastyNumericalError("Operation 'sqrt' received negative values.")
        return np.sqrt(values[0]), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad * 0.5 / out]


@register("maximum-with-scalar")
class MaximumWithScalar(Op):
    @classmethod
    def check(cls, shapes, attrs):
        if "scalar" not in attrs:
            raise DynastyConfigError(
                "Operation 'maximum-with-scalar' requires a 'scalar' attribute."
            )

    @classmethod
    def forward(cls, values, attrs):
        return np.maximum(values[0], float(attrs["scalar"])), None

    @classmethod
    def backward(cls, grad, values, out, attrs, cache):
        return [grad * (values[0] > float(attrs["scalar"]))]


# Functional front end


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return apply("add", [a, b])


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return apply("sub", [a, b])


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return apply("elementwise-mul", [a, b])


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return apply("div", [a, b])


def scale(a: ArrayLike, scalar: float) -> Tensor:
    return apply("scalar-mul", [a], {"scalar": scalar})


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return apply("matmul", [a, b])


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return apply("concat", list(tensors), {"axis": axis})


def slice_axis(a: ArrayLike, axis: int, start: int, stop: int) -> Tensor:
    return apply("slice", [a], {"axis": axis, "start": start, "stop": stop})


def take(a: Tensor, axis: int, index: int) -> Tensor:
    """
    Select one position along an axis, dropping that axis.
    """

    picked = slice_axis(a, axis, index, index + 1)
    shape = list(a.shape)
    del shape[axis % a.ndim]
    return reshape(picked, shape)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """
    Join same-shaped tensors along a new axis.
    """

    ndim = tensors[0].ndim + 1
    axis = axis % ndim
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    return apply("reshape", [a], {"shape": tuple(int(s) for s in shape)})


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    return apply("transpose", [a], {"axes": None if axes is None else tuple(axes)})


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    return apply("softmax-over-axis", [a], {"axis": axis})


def sigmoid(a: ArrayLike) -> Tensor:
    return apply("sigmoid", [a])


def tanh(a: ArrayLike) -> Tensor:
    return apply("tanh", [a])


def relu(a: ArrayLike) -> Tensor:
    return apply("relu", [a])


def dropout(
    a: ArrayLike,
    rate: float,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    return apply("dropout", [a], {"rate": rate, "rng": rng, "train": train, "mask": mask})


def reduce_sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return apply("sum-over-axis", [a], {"axis": axis})


def reduce_mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return apply("mean-over-axis", [a], {"axis": axis})


def absolute(a: ArrayLike) -> Tensor:
    return apply("abs", [a])


def square(a: ArrayLike) -> Tensor:
    return apply("square", [a])


def sqrt(a: ArrayLike) -> Tensor:
    return apply("sqrt", [a])


def maximum(a: ArrayLike, scalar: float) -> Tensor:
    return apply("maximum-with-scalar", [a], {"scalar": scalar})
