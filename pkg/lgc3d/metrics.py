"""Classification metrics: confusion matrix, overall and average accuracy, Cohen's kappa."""

import numpy as np
from pydantic import BaseModel

from .utils import LabelRangeError
from .utils import MetricsError
from .utils import ShapeError


def confusion_matrix(true: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Integer (K, K) counts, rows indexed by the true class and columns by the prediction."""
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise ShapeError(f"{true.size} true labels but {pred.size} predictions")
    if true.size == 0:
        raise MetricsError("cannot compute metrics on an empty sample")
    for name, labels in (("true", true), ("predicted", pred)):
        if labels.min() < 0 or labels.max() >= num_classes:
            raise LabelRangeError(f"{name} labels must lie in [0, {num_classes})")
    return np.bincount(true * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def _checked(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.int64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got shape {matrix.shape}")
    if matrix.sum() == 0:
        raise MetricsError("cannot compute metrics on an empty confusion matrix")
    return matrix


def overall_accuracy(matrix: np.ndarray) -> float:
    matrix = _checked(matrix)
    return float(np.trace(matrix) / matrix.sum())


def per_class_accuracy(matrix: np.ndarray) -> list[float | None]:
    """Recall of every class; ``None`` for classes without true samples."""
    matrix = _checked(matrix)
    support = matrix.sum(axis=1)
    return [float(matrix[k, k] / support[k]) if support[k] else None for k in range(matrix.shape[0])]


def average_accuracy(matrix: np.ndarray) -> float:
    """Mean recall over the classes that have at least one true sample."""
    recalls = [value for value in per_class_accuracy(matrix) if value is not None]
    return float(sum(recalls) / len(recalls))


def kappa(matrix: np.ndarray) -> float:
    """Cohen's kappa ``(p_o - p_e) / (1 - p_e)``."""
    matrix = _checked(matrix).astype(np.float64)
    n = matrix.sum()
    observed = np.trace(matrix) / n
    expected = float((matrix.sum(axis=1) * matrix.sum(axis=0)).sum() / n**2)
    if expected == 1.0:
        return 1.0 if observed == 1.0 else 0.0
    return float((observed - expected) / (1.0 - expected))


class MetricsReport(BaseModel):
    confusion: list[list[int]]
    overall_accuracy: float
    average_accuracy: float
    kappa: float
    per_class_accuracy: list[float | None]
    support: list[int]
    samples: int

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "MetricsReport":
        matrix = _checked(matrix)
        return cls(
            confusion=matrix.tolist(),
            overall_accuracy=overall_accuracy(matrix),
            average_accuracy=average_accuracy(matrix),
            kappa=kappa(matrix),
            per_class_accuracy=per_class_accuracy(matrix),
            support=matrix.sum(axis=1).tolist(),
            samples=int(matrix.sum()),
        )

    @classmethod
    def from_labels(cls, true: np.ndarray, pred: np.ndarray, num_classes: int) -> "MetricsReport":
        return cls.from_matrix(confusion_matrix(true, pred, num_classes))

    def matrix(self) -> np.ndarray:
        return np.asarray(self.confusion, dtype=np.int64)
