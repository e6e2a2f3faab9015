"""Global dependency modeling between AU features.

Single-head AU-to-AU attention produces an N x N matrix; a shared linear map
scores each attention row, and a softmax over rectified scores yields the
dependency weights used to pool a global feature that is added back to every
AU feature before classification. The squared-error dependency loss ties the
weights to the sample's multi-hot label.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import torch
import torch.nn as nn

from .core import MicroAUError


class LengthMismatchError(MicroAUError):
    pass


@dataclasses.dataclass
class GSDOutput:
    attention: Optional[torch.Tensor]  # (..., N, N), rows sum to 1; None for MLP ablations
    dependency_weights: Optional[torch.Tensor]  # (..., N), simplex; None for MLP ablations
    global_feature: torch.Tensor  # (..., d)
    enhanced: torch.Tensor  # (..., N, d): global feature added to each AU feature
    probabilities: torch.Tensor  # (..., N, 2), rows sum to 1


def _head(in_dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2))


class GlobalDependency(nn.Module):
    """Attention projections, row scorer, and per-AU classifier heads.

    fusion modes: 'gda' is the full attention path; 'add_mlp' and 'cat_mlp'
    are the ablations that replace the attention-pooled global feature with
    the plain mean of AU features, fused by addition or concatenation.
    """

    def __init__(self, dim: int, n_aus: int, fusion: str = "gda"):
        super().__init__()
        if fusion not in ("gda", "add_mlp", "cat_mlp"):
            raise MicroAUError(f"unknown fusion mode {fusion!r}")
        self.dim = dim
        self.n_aus = n_aus
        self.fusion = fusion
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.dep_fc = nn.Linear(n_aus, 1)
        # attention rows are nonnegative and sum to 1; a positive bias keeps the
        # rectified row scores out of the dead zone at initialization
        nn.init.constant_(self.dep_fc.bias, 0.5)
        head_in = 2 * dim if fusion == "cat_mlp" else dim
        hidden = max(dim // 2, 1)
        self.heads = nn.ModuleList(_head(head_in, hidden) for _ in range(n_aus))

    def forward(self, features: torch.Tensor) -> GSDOutput:
        # features: (..., N, d)
        if self.fusion == "gda":
            attention = gda_attention(self, features)
            weights = dependency_weights(self, attention)
            global_feat = global_feature(self, weights, features)
        else:
            attention = None
            weights = None
            global_feat = features.mean(dim=-2)
        probs, enhanced = au_probabilities(self, global_feat, features, self.fusion)
        return GSDOutput(
            attention=attention,
            dependency_weights=weights,
            global_feature=global_feat,
            enhanced=enhanced,
            probabilities=probs,
        )


def gda_attention(params: GlobalDependency, features: torch.Tensor) -> torch.Tensor:
    """Row-softmax self-attention over AU features: (..., N, d) -> (..., N, N)."""
    q = params.q_proj(features)
    k = params.k_proj(features)
    logits = q @ k.transpose(-2, -1) / math.sqrt(params.dim)
    return torch.softmax(logits, dim=-1)


def dependency_weights(params: GlobalDependency, attention: torch.Tensor) -> torch.Tensor:
    """Shared row scorer, rectified, softmax-normalized: (..., N, N) -> (..., N)."""
    scores = params.dep_fc(attention).squeeze(-1)
    return torch.softmax(torch.relu(scores), dim=-1)


def global_feature(
    params: GlobalDependency, weights: torch.Tensor, features: torch.Tensor
) -> torch.Tensor:
    """Dependency-weighted pooling of value-projected AU features -> (..., d)."""
    values = params.v_proj(features)
    return (weights.unsqueeze(-1) * values).sum(dim=-2)


def au_probabilities(
    params: GlobalDependency,
    global_feat: torch.Tensor,
    features: torch.Tensor,
    fusion: str = "gda",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-AU activation probabilities (..., N, 2) plus the fused features.

    'gda' and 'add_mlp' add the global vector to each AU feature; 'cat_mlp'
    concatenates it (head input width 2d).
    """
    expanded = global_feat.unsqueeze(-2).expand_as(features)
    enhanced = expanded + features
    if fusion == "cat_mlp":
        head_input = torch.cat([expanded, features], dim=-1)
    else:
        head_input = enhanced
    logits = torch.stack(
        [params.heads[n](head_input[..., n, :]) for n in range(params.n_aus)], dim=-2
    )
    return torch.softmax(logits, dim=-1), enhanced


def gd_loss(weights: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of dependency weights from the multi-hot label,
    (1/N) * sum_i (W_d[i] - Y[i])^2, averaged over any leading batch axis.

    The label is used unnormalized, so for multi-AU labels the minimum over
    the simplex is strictly positive.
    """
    if weights.shape != labels.shape:
        raise LengthMismatchError(f"weights {tuple(weights.shape)} vs labels {tuple(labels.shape)}")
    per_sample = ((weights - labels.to(weights.dtype)) ** 2).mean(dim=-1)
    return per_sample.mean()
