"""Knowledge-conflict measurement, accuracy tables, and the loss-landscape
grid over the orthogonal/positive/negative task-vector plane."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .bundle import TaskBundle
from .errors import TooFewTasks
from .merging import (
    MergeConfig,
    MergeResult,
    ada_tatr,
    task_arithmetic,
    tatr_merge,
    ties_merge,
    ties_tatr,
    weight_average,
)
from .mlp import backward, evaluate_accuracy, forward
from .params import Checkpoint, ew_combine, ew_scale, sum_in_order
from .task_vectors import TaskVector, decompose, percentile_zero_tol

GRID_COORDS = tuple((i - 2) / 10 for i in range(15))  # -0.2 .. 1.2 step 0.1


@dataclass(frozen=True)
class ConflictReport:
    pairwise: np.ndarray  # K x K, NaN on the diagonal
    total: float
    normalized: float  # total / (K (K - 1))
    basis: str  # "loss" | "accuracy"


@dataclass(frozen=True)
class LandscapeGrid:
    anchor_positive: Checkpoint  # plane coordinate (0, 1)
    anchor_negative: Checkpoint  # plane coordinate (0, 0)
    anchor_orthogonal: Checkpoint  # plane coordinate (1, 0)
    rows: list[tuple[float, float, float]]  # (u, v, loss)
    reference_task: int | None  # None = total loss over all tasks


def merge_bundle(
    bundle: TaskBundle, cfg: MergeConfig, exemplar_count: int | None = None
) -> MergeResult:
    """Run the configured merge method on a bundle (or bundle subset)."""
    tvs = bundle.task_vectors()
    if cfg.method == "average":
        merged = weight_average(bundle.experts)
        k = bundle.num_tasks
        return MergeResult(merged, None, [1.0 / k] * k, {"method": "average"})
    if cfg.method == "task_arithmetic":
        return task_arithmetic(bundle.theta_pre, tvs, cfg.lam)
    if cfg.method == "ties":
        return ties_merge(bundle.theta_pre, tvs, cfg.lam, cfg.ties_trim_keep)
    grads = bundle.gradient_estimates(exemplar_count)
    if cfg.method == "tatr":
        return tatr_merge(
            bundle.theta_pre, tvs, grads, cfg.lam, cfg.tau, cfg.sensitivity_variant
        )
    if cfg.method == "ties_tatr":
        return ties_tatr(
            bundle.theta_pre, tvs, grads, cfg.lam, cfg.tau,
            cfg.ties_trim_keep, cfg.ties_mask_from_trimmed,
        )
    # ada_tatr: the per-task test inputs serve as the unlabeled pools
    return ada_tatr(bundle.theta_pre, tvs, grads, cfg.tau, bundle.test_sets, cfg.ada)


def _task_metric(merged: Checkpoint, bundle: TaskBundle, j: int, basis: str) -> float:
    if basis == "loss":
        _, loss = forward(merged, bundle.test_sets[j])
        return loss
    return evaluate_accuracy(merged, bundle.test_sets[j])


def knowledge_conflict(
    bundle: TaskBundle,
    cfg: MergeConfig,
    basis: str = "loss",
    exemplar_count: int | None = None,
) -> ConflictReport:
    """Per ordered pair (i, j): the change in task j's metric caused by
    including task i in the merge.  Loss basis reports L_j(all) - L_j(all
    but i); accuracy basis flips the sign so a drop is reported positive."""
    if basis not in ("loss", "accuracy"):
        raise ValueError(f"unknown basis {basis!r}")
    k = bundle.num_tasks
    if k < 2:
        raise TooFewTasks(str(k))
    merged_all = merge_bundle(bundle, cfg, exemplar_count).merged
    metric_all = [_task_metric(merged_all, bundle, j, basis) for j in range(k)]
    pairwise = np.full((k, k), np.nan)
    for i in range(k):
        rest = [t for t in range(k) if t != i]
        merged_excl = merge_bundle(bundle.subset(rest), cfg, exemplar_count).merged
        for j in rest:
            metric_excl = _task_metric(merged_excl, bundle, j, basis)
            if basis == "loss":
                pairwise[i, j] = metric_all[j] - metric_excl
            else:
                pairwise[i, j] = metric_excl - metric_all[j]
    total = float(np.nansum(pairwise))
    return ConflictReport(pairwise, total, total / (k * (k - 1)), basis)


def signed_gradient(bundle: TaskBundle, j: int) -> Checkpoint:
    """Exact full-batch cross-entropy gradient of task j at the pre-trained
    point, evaluated on the task's test set (the loss shown in the grid)."""
    _, grads = backward(bundle.theta_pre, bundle.test_sets[j])
    return grads


def landscape(
    bundle: TaskBundle,
    reference_task: int | None = None,
    decomposition_fraction: float = 0.05,
) -> LandscapeGrid:
    """15x15 loss grid on the plane through the three component anchors.

    The cumulative delta (all tasks but the reference, or all tasks for the
    total view) is split against the reference gradient; the lowest
    ``decomposition_fraction`` of |grad * delta| products forms the
    orthogonal set.  Plane point (u, v) is
    theta_neg + u (theta_orth - theta_neg) + v (theta_pos - theta_neg).
    """
    k = bundle.num_tasks
    if k < 2:
        raise TooFewTasks(str(k))
    tvs = bundle.task_vectors()
    if reference_task is None:
        delta = sum_in_order([tv.delta for tv in tvs])
        grad = sum_in_order([signed_gradient(bundle, j) for j in range(k)])
        loss_tasks = list(range(k))
    else:
        delta = sum_in_order([tv.delta for tv in tvs if tv.task_id != reference_task])
        grad = signed_gradient(bundle, reference_task)
        loss_tasks = [reference_task]
    cumulative = TaskVector(-1, delta)
    tol = percentile_zero_tol(cumulative, grad, decomposition_fraction)
    dec = decompose(cumulative, grad, tol)

    theta_pos = ew_combine(bundle.theta_pre, dec.positive, "add")
    theta_neg = ew_combine(bundle.theta_pre, dec.negative, "add")
    theta_orth = ew_combine(bundle.theta_pre, dec.orthogonal, "add")
    axis_u = ew_combine(theta_orth, theta_neg, "sub")
    axis_v = ew_combine(theta_pos, theta_neg, "sub")

    def loss_at(point: Checkpoint) -> float:
        return sum(forward(point, bundle.test_sets[j])[1] for j in loss_tasks)

    rows = []
    for u in GRID_COORDS:
        for v in GRID_COORDS:
            point = ew_combine(
                ew_combine(theta_neg, ew_scale(axis_u, u), "add"),
                ew_scale(axis_v, v),
                "add",
            )
            rows.append((u, v, loss_at(point)))
    return LandscapeGrid(theta_pos, theta_neg, theta_orth, rows, reference_task)


def accuracy_table(
    bundle: TaskBundle, results: list[tuple[str, MergeResult]]
) -> list[tuple[str, list[float], float]]:
    """Rows of (method, per-task accuracies, average); always includes the
    pre-trained reference row and the per-task individual upper bound."""
    def row(name: str, accs: list[float]):
        return (name, accs, float(np.mean(accs)))

    k = bundle.num_tasks
    rows = [
        row("pretrained", [evaluate_accuracy(bundle.theta_pre, t) for t in bundle.test_sets]),
        row("individual", [evaluate_accuracy(bundle.experts[j], bundle.test_sets[j]) for j in range(k)]),
    ]
    for name, result in results:
        rows.append(row(name, [evaluate_accuracy(result.merged, t) for t in bundle.test_sets]))
    return rows


def write_conflict_csv(report: ConflictReport, path) -> None:
    k = report.pairwise.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "C"])
        for i in range(k):
            for j in range(k):
                if i != j:
                    writer.writerow([i, j, repr(report.pairwise[i, j])])
        writer.writerow(["total", "", repr(report.total)])
        writer.writerow(["normalized", "", repr(report.normalized)])


def write_landscape_csv(grid: LandscapeGrid, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "loss"])
        for u, v, loss in grid.rows:
            writer.writerow([repr(u), repr(v), repr(loss)])


def write_accuracy_csv(rows, num_tasks: int, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + [f"task{j}" for j in range(num_tasks)] + ["avg"])
        for name, accs, avg in rows:
            writer.writerow([name] + [repr(a) for a in accs] + [repr(avg)])
