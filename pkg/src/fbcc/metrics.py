"""Clustering accuracy, continual-learning metrics, distillation scores.

Clustering accuracy matches predicted clusters to ground-truth labels
one-to-one via optimal assignment on the contingency matrix (zero-padded to
square when the side counts differ), so it is invariant to relabeling of
either argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment


def _contingency(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred_ids, pred_idx = np.unique(pred, return_inverse=True)
    true_ids, true_idx = np.unique(truth, return_inverse=True)
    side = max(len(pred_ids), len(true_ids))
    table = np.zeros((side, side), dtype=np.int64)
    np.add.at(table, (pred_idx, true_idx), 1)
    return table


def clustering_accuracy(pred, truth) -> float:
    """Best-matching fraction of agreeing assignments, in [0, 1]."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.size == 0 or pred.shape != truth.shape:
        raise ValueError(
            f"need equal-length nonempty label arrays, got {pred.shape} "
            f"and {truth.shape}")
    table = _contingency(pred, truth)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum()) / pred.size


def clustering_accuracy_bruteforce(pred, truth) -> float:
    """Exhaustive-permutation oracle; only feasible for small cluster counts."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    table = _contingency(pred, truth)
    side = table.shape[0]
    best = max(sum(table[i, perm[i]] for i in range(side))
               for perm in permutations(range(side)))
    return float(best) / pred.size


@dataclass
class AccMatrix:
    """Per-task accuracy history: entry (i, j) is the accuracy on task i
    measured right after training task j, defined for i <= j only."""

    n_tasks: int
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.full((self.n_tasks, self.n_tasks), np.nan)
        else:
            self.values = np.asarray(self.values, dtype=np.float64)

    def set(self, task: int, after_task: int, acc: float) -> None:
        if not 1 <= task <= after_task <= self.n_tasks:
            raise ValueError(f"entry ({task}, {after_task}) is out of the "
                             f"defined triangle for {self.n_tasks} tasks")
        self.values[task - 1, after_task - 1] = acc

    def get(self, task: int, after_task: int) -> float:
        return float(self.values[task - 1, after_task - 1])

    def to_lists(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else float(v) for v in row]
                for row in self.values]

    @classmethod
    def from_lists(cls, rows: list[list[float | None]]) -> "AccMatrix":
        arr = np.asarray([[np.nan if v is None else v for v in row]
                          for row in rows], dtype=np.float64)
        return cls(n_tasks=arr.shape[0], values=arr)


def average_acc(matrix: AccMatrix) -> float:
    """Mean accuracy over all tasks at the end of the final task."""
    final = matrix.values[:, -1]
    if np.isnan(final).any():
        raise ValueError("final column is incomplete")
    return float(final.mean())


def average_forgetting(matrix: AccMatrix) -> float:
    """Mean over tasks of the worst accuracy drop from any earlier
    checkpoint to the final one.

    For task i the maximum runs over measurement times i..N-1 (entries
    before task i trains are undefined); negative contributions are kept.
    """
    n = matrix.n_tasks
    if n < 2:
        raise ValueError("forgetting needs at least 2 tasks")
    total = 0.0
    for i in range(1, n):
        history = matrix.values[i - 1, i - 1:n - 1]
        final = matrix.values[i - 1, n - 1]
        if np.isnan(history).any() or np.isnan(final):
            raise ValueError(f"row {i} has missing entries")
        total += float((history - final).max())
    return total / (n - 1)


@dataclass
class DistillationRecord:
    """Per-task diagonal accuracies of teacher and current student, plus the
    parameter budget, for the distillation-quality scores."""

    teacher_acc: list[float]
    student_acc: list[float]
    param_count_student: int
    param_count_teacher: int
    alpha: float = 0.5

    def __post_init__(self):
        if len(self.teacher_acc) != len(self.student_acc):
            raise ValueError("teacher and student series differ in length")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.param_count_student <= 0 or self.param_count_teacher <= 0:
            raise ValueError("parameter counts must be positive")


def acc_hat(record: DistillationRecord) -> float:
    """Mean teacher-minus-student accuracy gap (a student that outperforms
    the teacher yields a negative gap)."""
    if not record.teacher_acc:
        raise ValueError("empty accuracy series")
    gaps = [t - s for t, s in zip(record.teacher_acc, record.student_acc)]
    return float(np.mean(gaps))


def distillation_score(record: DistillationRecord) -> dict[str, float]:
    """Size/accuracy trade-off score; lower is better.

    Returns the score plus its two components: the parameter ratio and the
    mean per-task student/teacher accuracy ratio.
    """
    if any(t <= 0 for t in record.teacher_acc):
        raise ValueError("teacher accuracy must be positive in every task")
    param_ratio = record.param_count_student / record.param_count_teacher
    acc_ratio = float(np.mean([s / t for s, t in
                               zip(record.student_acc, record.teacher_acc)]))
    score = (record.alpha * param_ratio
             + (1.0 - record.alpha) * (1.0 - acc_ratio))
    return {"score": float(score), "param_ratio": float(param_ratio),
            "mean_acc_ratio": acc_ratio, "alpha": record.alpha}
