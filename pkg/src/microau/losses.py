"""Contrastive and classification objectives.

The fine-grained multi-label contrastive loss treats every same-label sample
pair within a batch as a positive, per AU: the label matrix marks matching
pairs, its rows are normalized into target distributions, and a symmetrized
cross-entropy (measured above the target-distribution floor, so a perfect
match scores exactly 0) is applied to the temperature-scaled cosine matrix.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn as nn

from .core import MicroAUError


class ZeroNormRowError(MicroAUError):
    pass


class NonPositiveTemperatureError(MicroAUError):
    pass


@dataclasses.dataclass
class ContrastiveBatch:
    """Per-AU visual/text feature stacks and binary labels for one batch.

    visual, text: (N, B, d_t) with unit-norm rows; labels: (N, B) in {0, 1}.
    text[n, b] embeds sample b's label-matching prompt for AU n.
    """

    visual: torch.Tensor
    text: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.visual.shape != self.text.shape:
            raise MicroAUError("visual and text stacks must share a shape")
        if self.labels.shape != self.visual.shape[:2]:
            raise MicroAUError("labels must be (N, B)")
        for name, feats in (("visual", self.visual), ("text", self.text)):
            norms = feats.norm(dim=-1)
            if torch.any(norms == 0):
                raise ZeroNormRowError(f"{name} features contain a zero row")
            if torch.any((norms - 1.0).abs() > 1e-5):
                raise MicroAUError(f"{name} features must be unit-norm within 1e-5")

    @property
    def n_aus(self) -> int:
        return self.visual.shape[0]

    @property
    def batch_size(self) -> int:
        return self.visual.shape[1]


def similarity_matrix(visual: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities, visual rows against text rows: (B, B).

    Inputs are expected unit-norm (then this equals the dot product), but the
    cosine is computed explicitly so slightly off-norm inputs stay exact.
    """
    vn = visual.norm(dim=-1, keepdim=True)
    tn = text.norm(dim=-1, keepdim=True)
    if torch.any(vn == 0) or torch.any(tn == 0):
        raise ZeroNormRowError("cannot take cosine of a zero-norm row")
    return (visual / vn) @ (text / tn).transpose(-2, -1)


def miauc_label_matrix(labels: torch.Tensor) -> torch.Tensor:
    """(B,) binary labels -> (B, B) matrix with 1 where labels match."""
    labels = labels.reshape(-1)
    return (labels.unsqueeze(0) == labels.unsqueeze(1)).to(torch.get_default_dtype())


def _as_temperature(temperature) -> torch.Tensor:
    tau = temperature if isinstance(temperature, torch.Tensor) else torch.as_tensor(temperature)
    if not torch.all(tau > 0):
        raise NonPositiveTemperatureError(f"temperature must be > 0, got {temperature}")
    return tau


def _soft_ce(logits: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Rows of target_mask are normalized to distributions; returns the mean
    row cross-entropy minus the target entropy (0 at an exact match)."""
    targets = target_mask / target_mask.sum(dim=-1, keepdim=True)
    log_probs = torch.log_softmax(logits, dim=-1)
    ce = -(targets * log_probs).sum(dim=-1)
    entropy = -(targets * torch.log(targets.clamp_min(1e-30))).sum(dim=-1)
    return (ce - entropy).mean()


def contrastive_from_similarity(
    similarities: torch.Tensor, target_mask: torch.Tensor, temperature
) -> torch.Tensor:
    """Symmetrized soft cross-entropy on a (B, B) similarity matrix against a
    {0,1} pair-match mask whose rows/columns are normalized into targets."""
    tau = _as_temperature(temperature)
    logits = similarities / tau
    row = _soft_ce(logits, target_mask)
    col = _soft_ce(logits.transpose(-2, -1), target_mask.transpose(-2, -1))
    return 0.5 * (row + col)


def _contrastive_term(
    visual: torch.Tensor, text: torch.Tensor, target_mask: torch.Tensor, temperature
) -> torch.Tensor:
    return contrastive_from_similarity(similarity_matrix(visual, text), target_mask, temperature)


def miauc_loss(batch: ContrastiveBatch, temperature) -> torch.Tensor:
    """Sum over AUs of the same-label-pair contrastive term."""
    total = None
    for n in range(batch.n_aus):
        mask = miauc_label_matrix(batch.labels[n]).to(batch.visual.dtype)
        term = _contrastive_term(batch.visual[n], batch.text[n], mask, temperature)
        total = term if total is None else total + term
    return total


def origcl_loss(batch: ContrastiveBatch, variant: str, temperature) -> torch.Tensor:
    """Diagonal-target contrastive baselines.

    'local': one identity-matrix term per AU, summed. 'global': the batch must
    carry exactly one group (a pooled per-sample visual feature against a
    whole-face text description); a single identity-matrix term.
    """
    eye = torch.eye(batch.batch_size, dtype=batch.visual.dtype)
    if variant == "local":
        total = None
        for n in range(batch.n_aus):
            term = _contrastive_term(batch.visual[n], batch.text[n], eye, temperature)
            total = term if total is None else total + term
        return total
    if variant == "global":
        if batch.n_aus != 1:
            raise MicroAUError("global variant expects one pooled feature group")
        return _contrastive_term(batch.visual[0], batch.text[0], eye, temperature)
    raise MicroAUError(f"unknown contrastive variant {variant!r}")


def multitask_loss(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Sum over AUs of cross-entropy on the (..., N, 2) probability rows,
    averaged over any leading batch axis."""
    labels = labels.to(torch.long)
    picked = probabilities.gather(-1, labels.unsqueeze(-1)).squeeze(-1)  # (..., N)
    per_sample = -torch.log(picked).sum(dim=-1)
    return per_sample.mean()


def total_loss(mt, miauc, gd, alpha: float, beta: float) -> torch.Tensor:
    """Composite objective: multitask + alpha * contrastive + beta * dependency."""
    if alpha < 0 or beta < 0:
        raise MicroAUError("trade-off coefficients must be >= 0")
    return mt + alpha * miauc + beta * gd


class VisualProjection(nn.Module):
    """Dimension bridge from AU visual features (d) to the text space (d_t)."""

    def __init__(self, dim: int, text_dim: int):
        super().__init__()
        self.linear = nn.Linear(dim, text_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features)


def project_and_normalize(projection: VisualProjection, features: torch.Tensor) -> torch.Tensor:
    projected = projection(features)
    return projected / projected.norm(dim=-1, keepdim=True).clamp_min(1e-12)
