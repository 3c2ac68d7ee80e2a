from __future__ import annotations
import dataclasses
from typing import Callable, Dict, List, Mapping, Sequence, Union
import numpy as np
from .tensor import Tensor, Tape
from .exceptions import DynastyConfigError, DynastyDeterminismError


# An element that misses the relative tolerance still passes when its error is within this many
# multiples of the spread between its own finite differences at neighbouring step sizes.
ROUNDOFF_SPREAD_FACTOR = 10.0
RELATIVE_FLOOR = 1e-8


@dataclasses.dataclass
class ParameterCheck:
    name: str
    elements: int
    max_relative_error: float
    max_absolute_error: float
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


@dataclasses.dataclass
class GradCheckReport:
    checks: List[ParameterCheck]
    step: float
    tol: float
    atol: float
    roundoff_floor: float

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def max_relative_error(self) -> float:
        return max((check.max_relative_error for check in self.checks), default=0.0)

    def failed(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]


def _evaluate(build: Callable[[], Tensor]) -> float:
    return build().item()


def _central_difference(
    build: Callable[[], Tensor], param: Tensor, index: tuple, step: float
) -> float:
    original = param.values[index]
    param.values[index] = original + step
    plus = _evaluate(build)
    param.values[index] = original - step
    minus = _evaluate(build)
    param.values[index] = original
    return (plus - minus) / (2.0 * step)


def grad_check(
    build: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    step: float = 1e-6,
    tol: float = 1e-5,
    atol: float = 0.0,
) -> GradCheckReport:
    """
    Compare backward gradients against central finite differences.

    Every element of every parameter is perturbed by `±step`. An element passes when its
    relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`, is at most `tol`.

    Finite differences carry roundoff of about `eps * max(1, |loss|) / step`, so an absolute
    difference below that floor (plus `atol`) also passes. An element outside both is
    differenced again at `step / 2` and `2 * step`: it passes only if its error is within
    10 times the spread of those estimates, that is, if the mismatch is roundoff in its own
    finite differences. A gradient that backward never produced shows identical estimates at
    every step size and fails.

    Args:
        build: Zero-argument function producing a scalar loss from the current parameter values.
        params: Parameters to check, by name or as a sequence.
        step: Finite-difference step.
        tol: Relative tolerance.
        atol: Extra absolute tolerance on top of the roundoff floor.

    Returns:
        A report with the maximum relative error per parameter.

    Raises:
        DynastyConfigError: If `step` is not positive or `atol` is negative.
        DynastyDeterminismError: If two evaluations of `build` on identical parameters differ.
    """

    if not step > 0:
        raise DynastyConfigError(f"Finite-difference step must be positive. Received: {step!r}")
    if atol < 0:
        raise DynastyConfigError(f"Absolute tolerance must be non-negative. Received: {atol!r}")

    if isinstance(params, Mapping):
        named: Dict[str, Tensor] = dict(params)
    else:
        named = {p.name or f"param_{i}": p for i, p in enumerate(params)}

    first, second = _evaluate(build), _evaluate(build)
    if first != second:
        raise DynastyDeterminismError(
            f"Loss builder is not deterministic: two evaluations gave {first!r} and {second!r}."
        )
    floor = float(np.finfo(np.float64).eps) * max(1.0, abs(first)) / step + atol

    for param in named.values():
        param.grad = None
    with Tape() as tape:
        loss = build()
        tape.backward(loss)

    checks = []
    for name, param in named.items():
        analytic = np.zeros(param.size) if param.grad is None else param.grad.reshape(-1).copy()
        relative = np.zeros(param.size)
        difference = np.zeros(param.size)
        failures = 0
        for i in range(param.size):
            index = np.unravel_index(i, param.shape)
            numeric = _central_difference(build, param, index, step)
            difference[i] = abs(analytic[i] - numeric)
            relative[i] = difference[i] / max(abs(analytic[i]), abs(numeric), RELATIVE_FLOOR)
            if relative[i] <= tol or difference[i] <= floor:
                continue
            spread = max(
                abs(numeric - _central_difference(build, param, index, step / 2.0)),
                abs(numeric - _central_difference(build, param, index, step * 2.0)),
            )
            if difference[i] > ROUNDOFF_SPREAD_FACTOR * spread:
                failures += 1

        checks.append(
            ParameterCheck(
                name=name,
                elements=param.size,
                max_relative_error=float(relative.max(initial=0.0)),
                max_absolute_error=float(difference.max(initial=0.0)),
                failures=failures,
            )
        )

    return GradCheckReport(checks=checks, step=step, tol=tol, atol=atol, roundoff_floor=floor)
