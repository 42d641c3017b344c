"""Assessment head and the coarse/fine relevance objectives.

Losses take raw logits so they stay numerically stable at saturation;
scores are ``sigmoid(logit)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

PAIR_MARGIN = 0.1
# label differences are products of float arithmetic (e.g. 0.95 - 0.85)
_MARGIN_SLACK = 1e-9


@dataclass(frozen=True)
class RelevanceJudgment:
    logit: float
    score: float


class AssessmentHead(nn.Module):
    """Linear projection of the relevance embedding to a single logit."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.proj = nn.Linear(d_model, 1)

    def forward(self, v_rel: torch.Tensor) -> torch.Tensor:
        if v_rel.shape[-1] != self.d_model:
            raise ValueError(f"expected relevance embedding of size {self.d_model}, got {tuple(v_rel.shape)}")
        return self.proj(v_rel).squeeze(-1)

    def judge(self, v_rel: torch.Tensor) -> RelevanceJudgment:
        z = self(v_rel).detach()
        if z.dim() != 0:
            raise ValueError("judge() takes a single relevance embedding")
        return RelevanceJudgment(logit=float(z), score=float(torch.sigmoid(z)))


def _as_tensor(values, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(values, dtype=like.dtype, device=like.device)


def coarse_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean binary cross-entropy of the scores against binary labels."""
    y = _as_tensor(labels, logits)
    if logits.numel() == 0:
        raise ValueError("coarse_loss needs at least one judgment")
    if y.shape != logits.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(y.shape)} differ in shape")
    return F.binary_cross_entropy_with_logits(logits, y)


def qualifying_pairs(label_scores: Sequence[float], margin: float = PAIR_MARGIN) -> list[tuple[int, int]]:
    """Ordered pairs (i, j) whose teacher labels satisfy ``s_i - s_j >= margin``."""
    s = [float(v) for v in label_scores]
    return [
        (i, j)
        for i in range(len(s))
        for j in range(len(s))
        if s[i] - s[j] >= margin - _MARGIN_SLACK
    ]


def pair_terms(logits: torch.Tensor, pairs: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Per-pair ``-log sigmoid(z_i - z_j)``."""
    if not pairs:
        return logits.new_zeros(0)
    i, j = (torch.as_tensor(idx, device=logits.device) for idx in zip(*pairs))
    return F.softplus(-(logits[i] - logits[j]))


def fine_loss(logits: torch.Tensor, label_scores, margin: float = PAIR_MARGIN) -> torch.Tensor:
    """Mean pairwise-logistic preference loss over one query's documents.

    Zero when no pair clears the margin.
    """
    scores = label_scores.tolist() if torch.is_tensor(label_scores) else list(label_scores)
    if len(scores) != logits.shape[-1]:
        raise ValueError(f"{logits.shape[-1]} logits but {len(scores)} label scores")
    terms = pair_terms(logits, qualifying_pairs(scores, margin))
    if terms.numel() == 0:
        return logits.sum() * 0.0
    return terms.mean()


def bi_granularity_loss(logits: torch.Tensor, binary_labels, label_scores) -> torch.Tensor:
    return coarse_loss(logits, binary_labels) + fine_loss(logits, label_scores)
