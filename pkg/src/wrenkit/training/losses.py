"""Focal + temperature-scaled distillation objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..config import TrainConfig

log = logging.getLogger(__name__)

P_FLOOR = 1e-12


def focal_loss(probs, label, gamma: float, class_weight=1.0):
    """-weight * (1 - p)^gamma * log(p) for the labelled class.

    Accepts a single distribution with an int label, or (B, K) with (B,)
    labels, in which case per-item losses are returned.
    """
    probs = torch.as_tensor(probs)
    label = torch.as_tensor(label)
    p = probs.gather(-1, label.reshape(-1, 1).long()).squeeze(-1) if probs.ndim > 1 \
        else probs[int(label)]
    if torch.any(p.detach() < P_FLOOR):
        log.warning("focal loss: p_label below %g clamped", P_FLOOR)
    p = p.clamp(min=P_FLOOR)
    return -torch.as_tensor(class_weight, dtype=p.dtype) * (1 - p) ** gamma * torch.log(p)


def focal_from_logits(logits, labels, gamma: float, class_weight):
    logp = F.log_softmax(logits, dim=-1).gather(-1, labels[:, None]).squeeze(-1)
    logp = logp.clamp(min=np.log(P_FLOOR))
    return -class_weight * (1 - logp.exp()) ** gamma * logp


def soft_distill_loss(student_logits, teacher_logits, temperature: float):
    """T^2 * KL(softmax(teacher / T) || softmax(student / T)), per item."""
    s = torch.as_tensor(student_logits)
    t = torch.as_tensor(teacher_logits, dtype=s.dtype)
    log_ps = F.log_softmax(s / temperature, dim=-1)
    log_pt = F.log_softmax(t / temperature, dim=-1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)
    return temperature ** 2 * kl.clamp(min=0.0)


def adaptive_alpha(teacher_max_prob: float, running_alpha: float, cfg: TrainConfig) -> float:
    """Exponential moving target alpha_base * confidence, rate ``adapt_rate``."""
    target = cfg.alpha * float(teacher_max_prob)
    a = (1.0 - cfg.adapt_rate) * running_alpha + cfg.adapt_rate * target
    return min(max(a, 0.0), cfg.alpha)


def class_weights(labels, n_classes: int | None = None) -> np.ndarray:
    """Inverse-frequency weights N / (K n_c), rescaled to mean 1."""
    labels = np.asarray(labels, dtype=np.int64)
    k = int(n_classes if n_classes is not None else labels.max() + 1)
    if len(np.unique(labels)) < 2:
        raise ValueError("class weighting needs at least two classes")
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError(f"empty class(es): {np.flatnonzero(counts == 0).tolist()}")
    w = len(labels) / (k * counts)
    return w / w.mean()


@dataclass
class LossParts:
    total: torch.Tensor
    focal: float
    soft: float
    alpha: float
    distilled: int


def combined_loss(logits, labels, cfg: TrainConfig, running_alpha: float,
                  teacher=None, teacher_mask=None, weights=None) -> LossParts:
    """(1 - a_i) * focal_i + a_i * soft_i averaged over the batch.

    ``a_i`` is ``running_alpha`` when item i has a teacher row whose top
    probability reaches ``cfg.teacher_threshold``, else 0.
    """
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    labels = torch.as_tensor(labels).long()
    cw = torch.ones(logits.shape[-1], dtype=logits.dtype) if weights is None \
        else torch.as_tensor(weights, dtype=logits.dtype)
    focal = focal_from_logits(logits, labels, cfg.gamma, cw[labels])
    if teacher is None:
        return LossParts(focal.mean(), float(focal.detach().mean()), 0.0, 0.0, 0)
    teacher = torch.as_tensor(teacher, dtype=logits.dtype)
    mask = torch.ones(len(labels), dtype=torch.bool) if teacher_mask is None \
        else torch.as_tensor(teacher_mask, dtype=torch.bool)
    conf = teacher.max(dim=-1).values
    use = mask & (conf >= cfg.teacher_threshold)
    t_logits = torch.log(teacher.clamp(min=P_FLOOR))
    soft = soft_distill_loss(logits, t_logits, cfg.temperature)
    a = torch.where(use, torch.full_like(focal, running_alpha), torch.zeros_like(focal))
    total = ((1 - a) * focal + a * torch.where(use, soft, torch.zeros_like(soft))).mean()
    soft_mean = float(soft.detach()[use].mean()) if bool(use.any()) else 0.0
    return LossParts(total, float(focal.detach().mean()), soft_mean, running_alpha, int(use.sum()))
