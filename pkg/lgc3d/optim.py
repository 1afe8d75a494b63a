"""RMSProp: ``v = alpha * v + (1 - alpha) * g**2`` then ``theta -= lr * g / (sqrt(v) + eps)``."""

import numpy as np

from .tensor import Tensor
from .utils import ShapeError


def rmsprop_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: dict[str, np.ndarray],
    lr: float = 5e-4,
    alpha: float = 0.99,
    eps: float = 1e-8,
) -> None:
    """Update ``params`` and the squared-gradient averages in ``state`` in place.

    Parameters without a gradient are left untouched; a missing state entry
    starts at zero.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"gradient of {name} has shape {grad.shape}, the parameter {param.shape}")
        square_avg = state.get(name)
        if square_avg is None:
            square_avg = state[name] = np.zeros_like(param)
        elif square_avg.shape != param.shape:
            raise ShapeError(f"optimizer state of {name} has shape {square_avg.shape}, the parameter {param.shape}")
        square_avg *= alpha
        square_avg += (1.0 - alpha) * grad * grad
        param -= (lr * grad / (np.sqrt(square_avg) + eps)).astype(param.dtype, copy=False)


class RMSProp:
    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, alpha: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.state: dict[str, np.ndarray] = {}

    def step(self) -> None:
        rmsprop_step(
            {name: tensor.data for name, tensor in self.params.items()},
            {name: tensor.grad for name, tensor in self.params.items()},
            self.state,
            self.lr,
            self.alpha,
            self.eps,
        )

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.state.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        unknown = sorted(set(state) - set(self.params))
        if unknown:
            raise ShapeError(f"optimizer state names unknown parameters {unknown[:3]}")
        self.state = {name: np.array(value, dtype=self.params[name].dtype) for name, value in state.items()}
