"""Central finite-difference checks of analytic gradients."""

from collections.abc import Callable

import numpy as np
from pydantic import BaseModel

from .tensor import Tensor
from .tensor import no_grad
from .utils import ShapeError

RELATIVE_FLOOR = 1e-3


class ParameterCheck(BaseModel):
    name: str
    elements: int
    max_abs_error: float
    max_rel_error: float
    errors: list[float]
    """Relative error of every element, in row-major order."""


class GradCheckReport(BaseModel):
    step: float
    tolerance: float
    parameters: list[ParameterCheck]

    @property
    def max_rel_error(self) -> float:
        return max((check.max_rel_error for check in self.parameters), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, 1e-3)``: relative for large gradients, absolute near zero."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), RELATIVE_FLOOR)
    return np.abs(analytic - numeric) / scale


def finite_difference_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare the gradients of the scalar ``f()`` against central differences, element by element.

    ``f`` must be deterministic and read ``params`` when called. Parameters are
    restored exactly after every perturbation.
    """
    for tensor in params.values():
        tensor.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ShapeError(f"gradient checks need a scalar function, got shape {loss.shape}")
    loss.backward()
    analytic = {
        name: tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
        for name, tensor in params.items()
    }

    checks = []
    with no_grad():
        for name, tensor in params.items():
            if not tensor.data.flags.c_contiguous:
                tensor.data = np.ascontiguousarray(tensor.data)
            flat = tensor.data.reshape(-1)
            numeric = np.zeros(flat.size, dtype=np.float64)
            for index in range(flat.size):
                original = flat[index]
                flat[index] = original + step
                plus = f().item()
                flat[index] = original - step
                minus = f().item()
                flat[index] = original
                numeric[index] = (plus - minus) / (2.0 * step)
            exact = analytic[name].reshape(-1).astype(np.float64)
            errors = relative_error(exact, numeric)
            checks.append(
                ParameterCheck(
                    name=name,
                    elements=int(flat.size),
                    max_abs_error=float(np.abs(exact - numeric).max(initial=0.0)),
                    max_rel_error=float(errors.max(initial=0.0)),
                    errors=errors.tolist(),
                )
            )
    return GradCheckReport(step=step, tolerance=tolerance, parameters=checks)
