"""Per-dimension conflict sensitivity, proportional threshold selection, and
trust-region mask construction.

The sensitivity of dimension n sums, over ordered task pairs (i, j) with
i != j, a product of the task-j gradient estimate and the task-i delta; the
variant decides which factors are taken in absolute value.  The highest
tau-fraction of dimensions is excluded from merging.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import IncompatibleShapes, TauOutOfRange, TooFewTasks
from .gradients import GradientEstimate
from .params import Checkpoint, ElementwiseMap
from .task_vectors import TaskVector

VARIANTS = ("standard", "zero_shot", "ntk", "signed_positive", "signed_negative")


@dataclass(frozen=True)
class Sensitivity:
    values: ElementwiseMap
    variant: str


@dataclass(frozen=True)
class TrustRegionMask:
    mask: ElementwiseMap  # {0,1} per coordinate
    tau: float
    epsilon: float
    excluded_count: int


def compute_sensitivity(
    grads: list[GradientEstimate], tvs: list[TaskVector], variant: str = "standard"
) -> Sensitivity:
    """Accumulates over ordered pairs (i, j), i != j, in ascending (j, i) order.

    The uniform 1/(K(K-1)) normalization is dropped: it rescales every
    coordinate identically and cannot change which dimensions are selected.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    k = len(tvs)
    if k < 2 or len(grads) != k:
        raise TooFewTasks(f"need >= 2 tasks with one gradient each, got {len(grads)}/{k}")
    ref = tvs[0].delta
    for tv in tvs:
        if not tv.delta.compatible(ref):
            raise IncompatibleShapes("task vectors disagree in structure")
    for g in grads:
        if not g.abs_grad.compatible(ref):
            raise IncompatibleShapes("gradient estimate does not match task vectors")

    names = ref.names
    acc = {n: np.zeros_like(ref[n]) for n in names}
    for j in range(k):
        for i in range(k):
            if i == j:
                continue
            for n in names:
                gj = grads[j].abs_grad[n]
                di = tvs[i].delta[n]
                if variant == "standard":
                    term = gj * np.abs(di)
                elif variant == "zero_shot":
                    term = np.abs(tvs[j].delta[n]) * np.abs(di)
                elif variant == "ntk":
                    term = gj * grads[i].abs_grad[n]
                elif variant == "signed_positive":
                    term = gj * di
                else:  # signed_negative
                    term = -gj * di
                acc[n] = acc[n] + term
    return Sensitivity(Checkpoint((n, acc[n]) for n in names), variant)


def proportion_selection(omega: Sensitivity, tau: float) -> tuple[float, np.ndarray]:
    """Descending sort; the first ceil(tau*N) positions are excluded.

    Ties at the boundary break by ascending flat index so the excluded count
    is exact.  Returns (epsilon, excluded flat indices); epsilon is the
    smallest excluded value, +inf when nothing is excluded.
    """
    if not 0.0 <= tau <= 1.0:
        raise TauOutOfRange(repr(tau))
    values = omega.values.flat()
    n = values.size
    m = int(np.ceil(tau * n))
    if m == 0:
        return float("inf"), np.empty(0, dtype=np.int64)
    # stable argsort of -values: descending by value, ascending index on ties
    order = np.argsort(-values, kind="stable")
    excluded = order[:m]
    return float(values[excluded[-1]]), np.sort(excluded)


def build_mask(omega: Sensitivity, tau: float) -> TrustRegionMask:
    """Binary mask that is 0 exactly on the excluded coordinates."""
    epsilon, excluded = proportion_selection(omega, tau)
    flat = np.ones(omega.values.total_dims)
    flat[excluded] = 0.0
    mask = Checkpoint.from_flat(omega.values, flat)
    return TrustRegionMask(mask, tau, epsilon, excluded.size)


def per_layer_sensitivity(omega: Sensitivity) -> list[tuple[str, float]]:
    """(tensor name, mean sensitivity) rows in checkpoint order."""
    return [(name, float(np.mean(arr))) for name, arr in omega.values]


def write_per_layer_csv(rows: list[tuple[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "mean_sensitivity"])
        for name, mean in rows:
            writer.writerow([name, repr(mean)])
