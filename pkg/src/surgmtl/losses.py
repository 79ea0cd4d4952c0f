"""Training objectives: contrastive/incremental pretraining, task losses and
the fixed-weight multi-task combinations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    finetune_w: float = 0.5
    kd_task_w: float = 0.35
    kd_distill_w: float = 0.15


def supcon_loss(embeddings: torch.Tensor, labels: torch.Tensor, tau: float = 0.07,
                check_norm: bool = True) -> torch.Tensor:
    """Supervised contrastive loss over a 2N x D batch of unit embeddings.

    Each anchor averages ``-log softmax`` over its positives; the softmax
    denominator runs over every other row (self excluded).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = embeddings.shape[0]
    if n < 4:
        raise ValueError("contrastive batch needs at least 4 rows")
    labels = labels.reshape(-1)
    if labels.shape[0] != n:
        raise ValueError("labels and embeddings disagree on batch size")
    if check_norm:
        norms = embeddings.detach().norm(dim=1)
        if torch.any((norms - 1).abs() > 1e-6):
            raise ValueError("embedding rows must be L2-normalised")
    eye = torch.eye(n, dtype=torch.bool, device=embeddings.device)
    positives = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = positives.sum(dim=1)
    if torch.any(n_pos == 0):
        raise ValueError("every anchor needs at least one positive")
    sim = embeddings @ embeddings.T / tau
    log_denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - log_denom
    per_anchor = -(log_prob * positives).sum(dim=1) / n_pos
    return per_anchor.mean()


def incremental_kd_loss(old_logits: torch.Tensor, new_logits: torch.Tensor,
                        temperature: float = 2.0) -> torch.Tensor:
    """T^2-scaled KL(old || new) restricted to the classes the old head knew."""
    k_old = old_logits.shape[1]
    if new_logits.shape[1] < k_old:
        raise ValueError("new head has fewer classes than the old head")
    if old_logits.shape[0] < 1:
        raise ValueError("empty batch")
    t = temperature
    log_p = F.log_softmax(old_logits / t, dim=1)
    log_q = F.log_softmax(new_logits[:, :k_old] / t, dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1)
    return kl.mean() * (t * t)


def cicl_total_loss(contra: torch.Tensor | float,
                    incre: Optional[torch.Tensor | float] = None) -> torch.Tensor | float:
    # incre=None is the first training session: no old model, no distillation term.
    if incre is None:
        return contra
    return contra + incre


def caption_ce_loss(logits: torch.Tensor, targets: torch.Tensor,
                    pad_mask: Optional[torch.Tensor] = None, pad_id: int = 0) -> torch.Tensor:
    """Token-level cross-entropy averaged over non-PAD positions.

    ``pad_mask`` is True where a position is padding; it defaults to
    ``targets == pad_id``.
    """
    if pad_mask is None:
        pad_mask = targets == pad_id
    keep = ~pad_mask
    n_keep = keep.sum()
    if n_keep == 0:
        raise ValueError("all caption positions are masked")
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                          reduction="none")
    return (nll * keep.reshape(-1)).sum() / n_keep


def interaction_ml_loss(edge_logits: torch.Tensor, edge_labels: torch.Tensor) -> torch.Tensor:
    if edge_logits.shape[0] < 1:
        raise ValueError("no edges to score")
    return F.binary_cross_entropy_with_logits(edge_logits, edge_labels.to(edge_logits.dtype))


def finetune_loss(l_caption, l_scene_graph, weights: LossWeights = LossWeights()):
    return weights.finetune_w * (l_caption + l_scene_graph)


def vanilla_loss(l_caption, l_scene_graph, weights: LossWeights = LossWeights()):
    # Same combination as fine-tuning; the regimes differ in when it is used.
    return weights.finetune_w * (l_caption + l_scene_graph)


def kd_loss(l_ce_c, l_mls_sg, l_kl_c, l_kl_sg, weights: LossWeights = LossWeights()):
    return weights.kd_task_w * (l_ce_c + l_mls_sg) + weights.kd_distill_w * (l_kl_c + l_kl_sg)


def kl_logits(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
              temperature: float = 1.0, kind: str = "softmax",
              mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """KL(teacher || student) on temperature-softened logits, scaled by T^2.

    kind="softmax" treats the last axis as one categorical distribution;
    kind="bernoulli" treats every entry as an independent sigmoid. ``mask``
    (True = keep) selects the leading positions that count toward the mean.
    """
    t = temperature
    s = student_logits / t
    te = teacher_logits / t
    if kind == "softmax":
        log_p = F.log_softmax(te, dim=-1)
        log_q = F.log_softmax(s, dim=-1)
        kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    elif kind == "bernoulli":
        log_p1, log_p0 = F.logsigmoid(te), F.logsigmoid(-te)
        log_q1, log_q0 = F.logsigmoid(s), F.logsigmoid(-s)
        kl = log_p1.exp() * (log_p1 - log_q1) + log_p0.exp() * (log_p0 - log_q0)
    else:
        raise ValueError(f"unknown KL kind {kind!r}")
    if mask is not None:
        if kind == "bernoulli" and mask.dim() < kl.dim():
            mask = mask.unsqueeze(-1).expand_as(kl)
        n = mask.sum()
        if n == 0:
            raise ValueError("all positions are masked")
        return (kl * mask).sum() / n * (t * t)
    return kl.mean() * (t * t)
