"""Patch Token Attention: per-AU contribution weighting and fusion of each
AU's landmark-selected tokens into a single feature, plus the max/mean
pooling baselines. No cross-AU information flows through this module.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn

from .core import MicroAUError


class EmptyGroupError(MicroAUError):
    pass


class PTAScorer(nn.Module):
    """Two-layer MLP mapping one d-dim patch token to a scalar contribution score."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(dim // 2, 1)
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # (..., d) -> (...)
        return self.net(tokens).squeeze(-1)


def pta_weights(scorer: Callable[[torch.Tensor], torch.Tensor], group: torch.Tensor) -> torch.Tensor:
    """Softmax of the scorer's per-token scalars over the group axis.

    group: (..., N_L, d) -> weights (..., N_L), strictly positive, summing to 1.
    """
    if group.shape[-2] == 0:
        raise EmptyGroupError("token group is empty")
    return torch.softmax(scorer(group), dim=-1)


def pta_fuse(scorer: Callable[[torch.Tensor], torch.Tensor], group: torch.Tensor) -> torch.Tensor:
    """Contribution-weighted sum of the group's tokens: (..., N_L, d) -> (..., d)."""
    weights = pta_weights(scorer, group)
    return (weights.unsqueeze(-1) * group).sum(dim=-2)


def pool_fuse(group: torch.Tensor, mode: str) -> torch.Tensor:
    """Componentwise max or mean over the group's tokens (ablation baselines)."""
    if group.shape[-2] == 0:
        raise EmptyGroupError("token group is empty")
    if mode == "maxpool":
        return group.max(dim=-2).values
    if mode == "meanpool":
        return group.mean(dim=-2)
    raise MicroAUError(f"unknown pooling mode {mode!r}")


class LocalFusion(nn.Module):
    """Per-AU fusion stage: one independent scorer per AU (or a shared one)."""

    def __init__(self, dim: int, n_aus: int, mode: str = "pta", shared: bool = False):
        super().__init__()
        self.mode = mode
        self.shared = shared
        if mode == "pta":
            n_scorers = 1 if shared else n_aus
            self.scorers = nn.ModuleList(PTAScorer(dim) for _ in range(n_scorers))
        else:
            self.scorers = nn.ModuleList()
        self.n_aus = n_aus

    def scorer_for(self, n: int) -> PTAScorer:
        return self.scorers[0 if self.shared else n]

    def forward(self, groups: Sequence[torch.Tensor]) -> torch.Tensor:
        """groups[n]: (..., N_L_n, d), one per AU -> fused (..., N, d)."""
        if len(groups) != self.n_aus:
            raise MicroAUError(f"expected {self.n_aus} token groups, got {len(groups)}")
        fused = []
        for n, group in enumerate(groups):
            if self.mode == "pta":
                fused.append(pta_fuse(self.scorer_for(n), group))
            else:
                fused.append(pool_fuse(group, self.mode))
        return torch.stack(fused, dim=-2)


def lsi_forward(fusion: LocalFusion, groups) -> torch.Tensor:
    """Fuse an AUTokenGroups (or list of (N_L, d) tensors) into an (N, d) stack."""
    return fusion([groups[n] for n in range(len(groups))])
