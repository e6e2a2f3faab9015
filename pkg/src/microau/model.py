"""The assembled detector: encoders, local fusion, global dependency stage,
and the visual-to-text projection with a learnable contrastive temperature.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import torch
import torch.nn as nn

from .core import AUTaskSpec, Config, MicroAUError
from .encoders import build_encoders, encode_prompts, set_trainable, PromptEmbeddings
from .gsd import GlobalDependency, GSDOutput
from .losses import (
    ContrastiveBatch,
    VisualProjection,
    miauc_loss,
    multitask_loss,
    origcl_loss,
    project_and_normalize,
    total_loss,
)
from .gsd import gd_loss
from .lsi import LocalFusion


@dataclasses.dataclass
class ModelOutput:
    fused: torch.Tensor  # (B, N, d) local AU features
    gsd: GSDOutput
    au_visual: torch.Tensor  # (B, N, d_t) projected + normalized AU features


class AUDetector(nn.Module):
    """End-to-end AU activation model over rendered flow images."""

    def __init__(self, config: Config, task_spec: AUTaskSpec):
        super().__init__()
        config.validate()
        self.config = config
        self.task_spec = task_spec
        self.visual_encoder, self.text_encoder = build_encoders(config)
        dim = getattr(self.visual_encoder, "dim")
        text_dim = getattr(self.text_encoder, "out_dim")
        pooling = config.pooling
        self.local_fusion = LocalFusion(
            dim, task_spec.n_aus, mode=pooling, shared=config.pta_shared
        )
        self.global_dependency = GlobalDependency(dim, task_spec.n_aus, fusion=config.fusion)
        self.visual_projection = VisualProjection(dim, text_dim)
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(config.temperature_init), dtype=torch.float32)
        )
        if config.freeze_temperature:
            self.log_temperature.requires_grad_(False)
        set_trainable(self.visual_encoder, config.finetune_last_k_layers)
        set_trainable(self.text_encoder, config.finetune_last_k_layers)

    @property
    def temperature(self) -> torch.Tensor:
        # floor at 1/100 mirrors the usual logit-scale clamp
        return self.log_temperature.exp().clamp_min(0.01)

    def encoder_parameters(self):
        yield from self.visual_encoder.parameters()
        yield from self.text_encoder.parameters()

    def head_parameters(self):
        yield from self.local_fusion.parameters()
        yield from self.global_dependency.parameters()
        yield from self.visual_projection.parameters()
        yield self.log_temperature

    def forward(self, images: torch.Tensor, token_indices: Sequence[torch.Tensor]) -> ModelOutput:
        """images: (B, 3, S, S); token_indices[n]: (B, N_L_n) flat grid cells."""
        tokens = self.visual_encoder(images)  # (B, h, w, d)
        b, h, w, d = tokens.shape
        flat = tokens.reshape(b, h * w, d)
        groups = []
        for cells in token_indices:
            idx = cells.unsqueeze(-1).expand(-1, -1, d)  # (B, N_L, d)
            groups.append(flat.gather(1, idx))
        fused = self.local_fusion(groups)  # (B, N, d)
        gsd_out = self.global_dependency(fused)
        source = fused if self.config.miauc_feature == "pre_gsd" else gsd_out.enhanced
        au_visual = project_and_normalize(self.visual_projection, source)
        return ModelOutput(fused=fused, gsd=gsd_out, au_visual=au_visual)

    def encode_prompts(self, emotion_texts: Sequence[str] = ()) -> PromptEmbeddings:
        return encode_prompts(self.text_encoder, self.task_spec, emotion_texts)

    def global_text_descriptions(self, labels: torch.Tensor) -> list[str]:
        """Whole-face multi-AU descriptions for the global contrastive baseline."""
        texts = []
        for row in labels:
            parts = [
                self.task_spec.prompts[n][0] if int(row[n]) == 1 else self.task_spec.prompts[n][1]
                for n in range(self.task_spec.n_aus)
            ]
            texts.append(". ".join(parts))
        return texts

    def training_losses(
        self, output: ModelOutput, labels: torch.Tensor
    ) -> dict[str, torch.Tensor]:
        """All loss terms for one batch; labels: (B, N) in {0, 1}."""
        cfg = self.config
        zero = torch.zeros((), dtype=output.au_visual.dtype)
        mt = multitask_loss(output.gsd.probabilities, labels)
        gd = (
            gd_loss(output.gsd.dependency_weights, _gd_targets(labels, cfg))
            if output.gsd.dependency_weights is not None
            else zero
        )
        cl = zero
        # contrastive terms need at least two samples; alpha=0 runs are
        # indistinguishable from cl_variant=none, so skip the work
        if cfg.cl_variant != "none" and cfg.alpha > 0 and labels.shape[0] >= 2:
            cl = self._contrastive_term(output, labels)
        total = total_loss(mt, cl, gd, cfg.alpha, cfg.beta)
        return {"total": total, "multitask": mt, "contrastive": cl, "gd": gd}

    def _contrastive_term(self, output: ModelOutput, labels: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if cfg.cl_variant == "global_orig":
            texts = self.global_text_descriptions(labels)
            text_feats = self.text_encoder(texts)
            text_feats = text_feats / text_feats.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            pooled = project_and_normalize(
                self.visual_projection,
                (output.fused if cfg.miauc_feature == "pre_gsd" else output.gsd.enhanced).mean(dim=1),
            )
            batch = ContrastiveBatch(
                visual=pooled.unsqueeze(0),
                text=text_feats.unsqueeze(0),
                labels=torch.zeros(1, labels.shape[0], dtype=torch.long),
            )
            return origcl_loss(batch, "global", self.temperature)
        prompts = self.encode_prompts()
        pos = prompts.pos / prompts.pos.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        neg = prompts.neg / prompts.neg.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        batch = build_contrastive_batch(output.au_visual, labels, pos, neg)
        if cfg.cl_variant == "miauc":
            return miauc_loss(batch, self.temperature)
        if cfg.cl_variant == "local_orig":
            return origcl_loss(batch, "local", self.temperature)
        raise MicroAUError(f"unknown cl_variant {cfg.cl_variant!r}")


def _gd_targets(labels: torch.Tensor, config: Config) -> torch.Tensor:
    targets = labels.to(torch.float32)
    if config.gd_normalize_labels:
        sums = targets.sum(dim=-1, keepdim=True).clamp_min(1.0)
        targets = targets / sums
    return targets


def build_contrastive_batch(
    au_visual: torch.Tensor, labels: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor
) -> ContrastiveBatch:
    """Assemble (N, B, d_t) stacks: per sample, the prompt embedding matching
    its label for each AU."""
    b, n = labels.shape
    mask = labels.to(torch.bool).transpose(0, 1).unsqueeze(-1)  # (N, B, 1)
    pos_stack = pos.unsqueeze(1).expand(-1, b, -1)
    neg_stack = neg.unsqueeze(1).expand(-1, b, -1)
    text = torch.where(mask, pos_stack, neg_stack)
    return ContrastiveBatch(
        visual=au_visual.transpose(0, 1), text=text, labels=labels.transpose(0, 1).to(torch.long)
    )


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(
        p.numel() for p in module.parameters() if (p.requires_grad or not trainable_only)
    )
