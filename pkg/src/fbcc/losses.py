"""The four loss families driving continual clustering.

All contrastive terms share one shape: an anchor row is scored against a set
of contrast rows by cosine similarity, the positive pair sits in the
numerator, and the denominator sums exp-similarities over every sample j
other than the anchor's own sample, counting both augmented views of j.
Both views of the anchor's own sample are excluded from the denominator,
including the positive itself.  Reductions are means with the prefactors
written out: 1/(2B) over anchors, 1/(2*n_clusters) over cluster columns,
1/(n_students) over distillation sources.

An optional temperature divides every similarity before exponentiation;
the default of 1.0 leaves the formulas untouched.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

Predictor = Callable[[Tensor], Tensor]


class LossContractError(ValueError):
    """A loss precondition was violated."""


def _as_constant(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _require_detached(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.requires_grad:
            raise LossContractError(f"{name} must be detached from the graph")


def _positive_mask(n: int, kind: str) -> np.ndarray:
    idx = np.arange(2 * n)
    mask = np.zeros((2 * n, 2 * n))
    if kind == "cross":  # positive is the other view of the same sample
        mask[idx, (idx + n) % (2 * n)] = 1.0
    elif kind == "aligned":  # positive is the same row in the contrast set
        mask[idx, idx] = 1.0
    else:
        raise ValueError(kind)
    return mask


def _negative_mask(n: int) -> np.ndarray:
    # Keep column q for anchor p iff they come from different samples.
    idx = np.arange(2 * n)
    return (idx[None, :] % n != idx[:, None] % n).astype(np.float64)


def _per_anchor_nce(anchors_a: Tensor, anchors_b: Tensor,
                    contrasts_a: Tensor, contrasts_b: Tensor,
                    positive: str, temperature: float,
                    extra_negatives: Tensor | None = None) -> Tensor:
    """Column of per-anchor -log(pos / negatives) terms, shape (2n, 1)."""
    n = anchors_a.shape[0]
    anchors = T.concat_rows([anchors_a, anchors_b])
    contrasts = T.concat_rows([contrasts_a, contrasts_b])
    sims = T.scale(T.cosine_matrix(anchors, contrasts), 1.0 / temperature)

    pos = T.row_sum(T.mul(sims, _as_constant(_positive_mask(n, positive))))
    den = T.row_sum(T.mul(T.exp(sims), _as_constant(_negative_mask(n))))
    if extra_negatives is not None and extra_negatives.shape[0] > 0:
        proto_sims = T.scale(T.cosine_matrix(anchors, extra_negatives),
                             1.0 / temperature)
        den = T.add(den, T.row_sum(T.exp(proto_sims)))
    return T.sub(T.log(den), pos)


def instance_contrastive_loss(z_a: Tensor, z_b: Tensor,
                              prototypes=None,
                              temperature: float = 1.0) -> Tensor:
    """Cross-view contrastive loss over teacher projections, with stored
    prototypes of earlier tasks acting as additional repelling negatives.

    ``prototypes`` is an optional (n_prototypes x dim) constant; ``None`` or
    an empty set reduces to the plain cross-view loss.
    """
    _check_pair("instance_contrastive_loss", z_a, z_b)
    if z_a.shape[0] < 2:
        raise LossContractError(
            "instance_contrastive_loss needs a batch of at least 2")
    extra = None
    if prototypes is not None:
        extra = _as_constant(prototypes)
        _require_detached("prototypes", extra)
        if extra.values.size == 0:
            extra = None
        elif extra.values.ndim != 2 or extra.shape[1] != z_a.shape[1]:
            raise LossContractError(
                f"prototypes shape {extra.shape} does not match "
                f"projections {z_a.shape}")
    losses = _per_anchor_nce(z_a, z_b, z_a, z_b, positive="cross",
                             temperature=temperature, extra_negatives=extra)
    return T.mean(losses)


def forward_distillation_loss(z_a: Tensor, z_b: Tensor,
                              student_projections: Sequence[tuple[Tensor, Tensor]],
                              predictors: Sequence[Predictor],
                              temperature: float = 1.0) -> Tensor:
    """Pull each predicted teacher projection toward the matching frozen
    student projection, contrasted against the student projections of every
    other sample in the batch.

    With no students (the first task) the contribution is defined as zero.
    Gradient reaches the teacher path and the predictors only; student
    projections must arrive detached.
    """
    _check_pair("forward_distillation_loss", z_a, z_b)
    if len(student_projections) != len(predictors):
        raise LossContractError(
            f"{len(student_projections)} student pairs vs "
            f"{len(predictors)} predictors")
    if not student_projections:
        return Tensor(np.asarray(0.0))
    per_student = []
    for (s_a, s_b), predict in zip(student_projections, predictors):
        _require_detached("student projections", s_a, s_b)
        losses = _per_anchor_nce(predict(z_a), predict(z_b), s_a, s_b,
                                 positive="aligned", temperature=temperature)
        per_student.append(T.mean(losses))
    total = per_student[0]
    for extra in per_student[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(per_student))


def assignment_entropy(probs_a: Tensor, probs_b: Tensor) -> Tensor:
    """Entropy of the per-cluster assignment masses, summed over both views.

    For each view, a cluster's mass is its column sum divided by the total
    mass of the matrix; the result lies in [0, 2*ln(n_clusters)] with the
    maximum at uniform column masses.
    """
    h_total = None
    for probs in (probs_a, probs_b):
        masses = T.col_sum(probs)
        q = T.div(masses, T.tensor_sum(probs))
        h = T.scale(T.tensor_sum(T.mul(q, T.log(q))), -1.0)
        h_total = h if h_total is None else T.add(h_total, h)
    return h_total


def cluster_contrastive_loss(probs_a: Tensor, probs_b: Tensor,
                             temperature: float = 1.0) -> Tensor:
    """Contrast cluster-assignment columns across views, minus the assignment
    entropy (subtracting maximizes it, steering away from single-cluster
    collapse)."""
    _check_pair("cluster_contrastive_loss", probs_a, probs_b)
    n_clusters = probs_a.shape[1]
    if n_clusters < 2:
        raise LossContractError(
            "cluster_contrastive_loss needs at least 2 clusters")
    for name, probs in (("probs_a", probs_a), ("probs_b", probs_b)):
        rows = probs.values.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-6) or np.any(probs.values < -1e-6):
            raise LossContractError(f"{name} rows are not stochastic")
    losses = _per_anchor_nce(T.transpose(probs_a), T.transpose(probs_b),
                             T.transpose(probs_a), T.transpose(probs_b),
                             positive="cross", temperature=temperature)
    return T.sub(T.mean(losses), assignment_entropy(probs_a, probs_b))


def student_imitation_loss(h_s_a: Tensor, h_s_b: Tensor,
                           z_s_a: Tensor, z_s_b: Tensor,
                           h_t_a: Tensor, h_t_b: Tensor,
                           z_t_a: Tensor, z_t_b: Tensor,
                           temperature: float = 1.0) -> Tensor:
    """Train the current student to reproduce the teacher: a per-sample
    mean-squared latent match plus a contrastive term that copies the
    teacher's within-batch similarity structure.

    Teacher tensors must arrive detached; gradient reaches the student only.
    """
    _check_pair("student_imitation_loss", h_s_a, h_s_b)
    _check_pair("student_imitation_loss", z_s_a, z_s_b)
    _require_detached("teacher outputs", h_t_a, h_t_b, z_t_a, z_t_b)
    if h_s_a.shape != h_t_a.shape:
        raise LossContractError(
            f"latent shapes differ: {h_s_a.shape} vs {h_t_a.shape}")

    dim = h_s_a.shape[1]
    mse_cols = []
    for h_s, h_t in ((h_s_a, h_t_a), (h_s_b, h_t_b)):
        diff = T.sub(h_s, h_t)
        mse_cols.append(T.scale(T.row_sum(T.mul(diff, diff)), 1.0 / dim))
    contrast = _per_anchor_nce(z_s_a, z_s_b, z_t_a, z_t_b,
                               positive="aligned", temperature=temperature)
    return T.mean(T.add(T.concat_rows(mse_cols), contrast))


def combined_forward_loss(contrastive: Tensor, distillation: Tensor,
                          clustering: Tensor) -> Tensor:
    """Unweighted sum of the three teacher-phase terms."""
    return T.add(T.add(contrastive, distillation), clustering)


def _check_pair(name: str, a: Tensor, b: Tensor) -> None:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape != b.shape:
        raise LossContractError(
            f"{name}: paired views need equal rank-2 shapes, "
            f"got {a.shape} and {b.shape}")
