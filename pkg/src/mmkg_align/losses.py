"""Training objectives over batches of aligned entity pairs.

For a batch of B pairs (left rows L, right rows R), the alignment
distribution of an anchor L[i] is a softmax at temperature tau over
2B-1 candidates: the other left rows (in-graph negatives), then all
right rows, with R[i] the positive. The contrastive loss averages
-log of the symmetrized positive probability. The distillation loss
pushes each modality's distribution toward the fused embedding's
distribution (teacher detached) through a bidirectional KL. The
combined objective weights per-modality terms by learned uncertainty
scales s via exp(-s) * term + s/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmkg_align import tensor as T
from mmkg_align.tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass
class BatchPairs:
    """Index pairs for one minibatch; ids must not repeat on either side."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        if self.left.shape != self.right.shape or self.left.ndim != 1:
            raise ValueError("BatchPairs: left and right must be equal-length vectors")
        if len(np.unique(self.left)) != len(self.left) or \
                len(np.unique(self.right)) != len(self.right):
            raise ValueError("BatchPairs: duplicate entity id within a batch")

    def __len__(self):
        return len(self.left)


def alignment_probabilities(left: Tensor, right: Tensor, temperature: float):
    """Row-stochastic (B, 2B-1) matrix of candidate probabilities.

    Columns are the B-1 other left rows followed by all B right rows;
    the positive for anchor i sits at column (B-1)+i, returned as an
    index vector alongside the matrix.
    """
    b = left.shape[0]
    if b < 2:
        raise ValueError(f"alignment_probabilities: need at least 2 pairs, got {b}")
    if left.shape != right.shape:
        raise ValueError(
            f"alignment_probabilities: shapes {left.shape} and {right.shape} differ"
        )
    ln = T.l2_normalize_rows(left)
    rn = T.l2_normalize_rows(right)
    within = T.drop_diagonal(T.matmul(ln, T.transpose(ln)))
    across = T.matmul(ln, T.transpose(rn))
    q = T.row_softmax(T.concat_cols([within, across]), temperature)
    return q, (b - 1) + np.arange(b)


def contrastive_loss(left: Tensor, right: Tensor, temperature: float) -> Tensor:
    """Mean -log of the symmetrized positive alignment probability."""
    q12, pos12 = alignment_probabilities(left, right, temperature)
    q21, pos21 = alignment_probabilities(right, left, temperature)
    avg = (T.take_per_row(q12, pos12) + T.take_per_row(q21, pos21)) * 0.5
    return -(T.log(T.clip_min(avg, PROB_FLOOR)).mean())


def _kl_to_student(teacher: np.ndarray, student: Tensor) -> Tensor:
    """Mean-over-rows KL(teacher || student); teacher is a constant."""
    log_teacher = np.log(np.maximum(teacher, PROB_FLOOR))
    log_student = T.log(T.clip_min(student, PROB_FLOOR))
    per_entry = Tensor(teacher) * (Tensor(log_teacher) - log_student)
    return per_entry.sum() * (1.0 / teacher.shape[0])


def distill_loss(joint_left: Tensor, joint_right: Tensor, modal_left: Tensor,
                 modal_right: Tensor, temperature: float) -> Tensor:
    """Bidirectional KL from the detached joint distribution to a
    modality's distribution; gradients flow only through the modality."""
    t12, _ = alignment_probabilities(joint_left.detach(), joint_right.detach(),
                                     temperature)
    t21, _ = alignment_probabilities(joint_right.detach(), joint_left.detach(),
                                     temperature)
    s12, _ = alignment_probabilities(modal_left, modal_right, temperature)
    s21, _ = alignment_probabilities(modal_right, modal_left, temperature)
    return (_kl_to_student(t12.data, s12) + _kl_to_student(t21.data, s21)) * 0.5


@dataclass
class LossBreakdown:
    total: Tensor
    fused_contrastive: float
    contrastive: dict[str, float]
    distill: dict[str, float]
    alpha: dict[str, float]
    beta: dict[str, float]

    def scalars(self) -> dict:
        return {
            "total": self.total.item(),
            "fused_contrastive": self.fused_contrastive,
            "contrastive": dict(self.contrastive),
            "distill": dict(self.distill),
            "alpha": dict(self.alpha),
            "beta": dict(self.beta),
        }


def combined_loss(modal_left: dict[str, Tensor], modal_right: dict[str, Tensor],
                  joint_left: Tensor, joint_right: Tensor, order,
                  uncert_contrastive: Tensor, uncert_distill: Tensor,
                  tau_contrastive: float, tau_distill: float,
                  modal_contrastive: bool = True, distill: bool = True,
                  adaptive_weights: bool = True) -> LossBreakdown:
    """Fused contrastive term plus uncertainty-weighted per-modality
    contrastive and distillation terms.

    The fused term enters unweighted. With adaptive_weights off, the
    uncertainty parameters are replaced by constant zeros (uniform
    weights) and receive no gradient.
    """
    order = list(order)
    k = len(order)
    fused = contrastive_loss(joint_left, joint_right, tau_contrastive)
    cl = {m: contrastive_loss(modal_left[m], modal_right[m], tau_contrastive)
          for m in order}
    kd = {m: distill_loss(joint_left, joint_right, modal_left[m], modal_right[m],
                          tau_distill)
          for m in order}

    total = fused
    s_cl = T.gather_rows(uncert_contrastive, np.arange(k)) if adaptive_weights \
        else Tensor(np.zeros(k))
    s_kd = T.gather_rows(uncert_distill, np.arange(k)) if adaptive_weights \
        else Tensor(np.zeros(k))
    if modal_contrastive and k:
        cl_vec = T.stack([cl[m] for m in order])
        total = total + (T.exp(-s_cl) * cl_vec + s_cl * 0.5).sum()
    if distill and k:
        kd_vec = T.stack([kd[m] for m in order])
        total = total + (T.exp(-s_kd) * kd_vec + s_kd * 0.5).sum()

    alpha = {m: float(np.exp(0.5 * s_cl.data[i])) for i, m in enumerate(order)}
    beta = {m: float(np.exp(0.5 * s_kd.data[i])) for i, m in enumerate(order)}
    return LossBreakdown(
        total=total,
        fused_contrastive=fused.item(),
        contrastive={m: cl[m].item() for m in order},
        distill={m: kd[m].item() for m in order},
        alpha=alpha,
        beta=beta,
    )
