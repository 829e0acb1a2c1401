"""Training objectives: per-stage InfoNCE, interaction distillation,
cross-stage self-distillation, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .interactions import StiDistributions


@dataclass
class LossConfig:
    tau: float = 0.1
    lambda_s: float = 1.0
    lambda_d: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.lambda_s < 0 or self.lambda_d < 0:
            raise ValueError("loss weights must be non-negative")


def info_nce(similarity: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over a B x B similarity matrix (diagonal = positives)."""
    b = similarity.shape[0]
    if similarity.data.ndim != 2 or similarity.shape != (b, b) or b < 2:
        raise ValueError("similarity must be a square B x B matrix with B >= 2")
    logits = ad.mul(similarity, 1.0 / tau)
    eye = Tensor(np.eye(b))
    p_rows = ad.softmax(logits, axis=1)
    p_cols = ad.softmax(logits, axis=0)
    l_t2m = ad.mul(ad.tsum(ad.mul(ad.log(p_rows), eye)), -1.0 / b)
    l_m2t = ad.mul(ad.tsum(ad.mul(ad.log(p_cols), eye)), -1.0 / b)
    return l_t2m + l_m2t


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) = sum p * ln(p/q); q is clamped at 1e-12 inside the log."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if p.data.min() < 0 or q.data.min() < 0:
        raise ValueError("distributions must be non-negative")
    if p.shape != q.shape:
        raise ValueError("shape mismatch between distributions")
    return ad.tsum(ad.mul(p, ad.log(p) - ad.log(q)))


def _mean_row_kl(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of KL(p_row || q_row) for row-stochastic matrices."""
    if p.shape != q.shape:
        raise ValueError("shape mismatch between distribution stacks")
    rows = p.shape[0]
    return ad.mul(ad.tsum(ad.mul(p, ad.log(p) - ad.log(q))), 1.0 / rows)


def sti_distillation(teacher: StiDistributions, student_logits: Tensor) -> Tensor:
    """KL from detached teacher interaction distributions to the student's.

    The student's m2t/t2m distributions are the axis-wise softmaxes of its
    logit grid; the loss averages the per-token KLs over both directions.
    """
    n_t, n_m = student_logits.shape
    if teacher.m2t.shape != (n_m, n_t) or teacher.t2m.shape != (n_t, n_m):
        raise ValueError("teacher/student grid shapes do not match")
    student_m2t = ad.transpose(ad.softmax(student_logits, axis=0))
    student_t2m = ad.softmax(student_logits, axis=1)
    return (_mean_row_kl(Tensor(teacher.m2t), student_m2t)
            + _mean_row_kl(Tensor(teacher.t2m), student_t2m))


def self_distillation(s_jnt: Tensor, s_sgm: Tensor, tau: float) -> Tensor:
    """KL(segment-stage distributions || detached joint-stage distributions).

    Row softmaxes give the text-to-motion distributions, column softmaxes
    the motion-to-text ones; both directions are averaged over the batch.
    """
    if s_jnt.shape != s_sgm.shape:
        raise ValueError("stage similarity matrices must share a shape")
    teacher = Tensor(s_jnt.data / tau)       # detached teacher signal
    student = ad.mul(s_sgm, 1.0 / tau)
    l_rows = _mean_row_kl(ad.softmax(student, axis=1), ad.softmax(teacher, axis=1))
    l_cols = _mean_row_kl(ad.transpose(ad.softmax(student, axis=0)),
                          ad.transpose(ad.softmax(teacher, axis=0)))
    return l_rows + l_cols


def total_loss(l_jnt: Tensor, l_sgm: Tensor, l_hlt: Tensor,
               l_sd_jnt: Tensor, l_sd_sgm: Tensor, l_d: Tensor,
               cfg: LossConfig) -> Tensor:
    loss = l_jnt + l_sgm + l_hlt
    if cfg.lambda_s:
        loss = loss + ad.mul(l_sd_jnt + l_sd_sgm, cfg.lambda_s)
    if cfg.lambda_d:
        loss = loss + ad.mul(l_d, cfg.lambda_d)
    return loss
