"""Task vectors (fine-tuned minus pre-trained) and their gradient-relative
three-way decomposition into orthogonal / positive / negative components."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IncompatibleShapes, NegativeTolerance
from .params import Checkpoint, ElementwiseMap, ew_combine


@dataclass(frozen=True)
class TaskVector:
    task_id: int
    delta: ElementwiseMap


@dataclass(frozen=True)
class Decomposition:
    """Disjoint-support split of a delta by the sign of grad * delta."""

    orthogonal: ElementwiseMap
    positive: ElementwiseMap
    negative: ElementwiseMap
    zero_tol: float

    def recompose(self) -> ElementwiseMap:
        return ew_combine(ew_combine(self.orthogonal, self.positive, "add"), self.negative, "add")


def compute_task_vector(theta_k: Checkpoint, theta_pre: Checkpoint, task_id: int = 0) -> TaskVector:
    if not theta_k.compatible(theta_pre):
        raise IncompatibleShapes("fine-tuned and pre-trained checkpoints differ in structure")
    return TaskVector(task_id, ew_combine(theta_k, theta_pre, "sub"))


def decompose(delta: TaskVector, grad: ElementwiseMap, zero_tol: float = 0.0) -> Decomposition:
    """Split each coordinate by the product p = grad[n] * delta[n].

    |p| <= zero_tol goes to the orthogonal component, p > 0 to positive,
    p < 0 to negative; the three parts sum back to the delta exactly.
    """
    if zero_tol < 0:
        raise NegativeTolerance(repr(zero_tol))
    if not grad.compatible(delta.delta):
        raise IncompatibleShapes("gradient does not match the task vector's structure")
    orth, pos, neg = [], [], []
    for name, d in delta.delta:
        p = grad[name] * d
        near_zero = np.abs(p) <= zero_tol
        orth.append((name, np.where(near_zero, d, 0.0)))
        pos.append((name, np.where(~near_zero & (p > 0), d, 0.0)))
        neg.append((name, np.where(~near_zero & (p < 0), d, 0.0)))
    return Decomposition(Checkpoint(orth), Checkpoint(pos), Checkpoint(neg), zero_tol)


def percentile_zero_tol(delta: TaskVector, grad: ElementwiseMap, fraction: float) -> float:
    """Tolerance placing the lowest ``fraction`` of |grad * delta| products in
    the orthogonal set (an exact ``zero_tol`` of 0 is measure-zero in floats)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    products = np.abs(grad.flat() * delta.delta.flat())
    if products.size == 0 or fraction == 0.0:
        return 0.0
    k = int(np.ceil(fraction * products.size))
    return float(np.sort(products)[k - 1])
