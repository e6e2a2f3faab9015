"""Visual and text encoder contracts.

The toy encoders are small patch-token / character-token transformers meant
for desk-scale verification: deterministic given (weights, input), cheap
enough for finite-difference checks. The pretrained adapter wraps locally
stored CLIP-style weights behind the same contract; no test requires it.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .core import AUTaskSpec, MicroAUError, TokenGrid


class ShapeMismatchError(MicroAUError):
    pass


class EmptyPromptError(MicroAUError):
    pass


class LayerCountExceededError(MicroAUError):
    pass


@dataclasses.dataclass
class PromptEmbeddings:
    """Per-AU positive/negative text embeddings plus emotion label-text embeddings."""

    pos: torch.Tensor  # (N, d_t)
    neg: torch.Tensor  # (N, d_t)
    emotion: torch.Tensor  # (R, d_t); empty (0, d_t) when no emotion texts given


class SelfAttentionBlock(nn.Module):
    """Pre-norm single-head attention + MLP block, no dropout."""

    def __init__(self, dim: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )
        self.scale = dim ** -0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, d)
        h = self.norm1(x)
        attn = torch.softmax(self.q(h) @ self.k(h).transpose(-2, -1) * self.scale, dim=-1)
        x = x + self.proj(attn @ self.v(h))
        x = x + self.mlp(self.norm2(x))
        return x


class ToyVisualEncoder(nn.Module):
    """Per-patch linear embedding followed by `depth` self-attention blocks.

    depth=0 leaves pure per-patch embeddings with no token mixing and no
    position information, so translating the input by one patch width shifts
    the token grid by exactly one cell.
    """

    def __init__(self, input_size: int = 224, patch_size: int = 32, dim: int = 32, depth: int = 1):
        super().__init__()
        if input_size % patch_size != 0:
            raise MicroAUError(f"input_size {input_size} not divisible by patch_size {patch_size}")
        self.input_size = input_size
        self.patch_size = patch_size
        self.dim = dim
        self.grid = input_size // patch_size
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid, dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(SelfAttentionBlock(dim) for _ in range(depth))
        self.output_projection: Optional[nn.Module] = None

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 3, S, S) -> tokens (B, h, w, d)
        if images.shape[-2:] != (self.input_size, self.input_size):
            raise ShapeMismatchError(
                f"expected {self.input_size}x{self.input_size} input, got {tuple(images.shape[-2:])}"
            )
        x = self.patch_embed(images)  # (B, d, h, w)
        b, d, h, w = x.shape
        x = x.flatten(2).transpose(1, 2)  # (B, hw, d)
        if self.blocks:
            # position information belongs to the transformer stack; depth 0
            # must stay a pure per-patch map
            x = x + self.pos_embed
            for blk in self.blocks:
                x = blk(x)
        return x.reshape(b, h, w, d)


class ToyTextEncoder(nn.Module):
    """Character-hash embedding table + self-attention blocks + mean pooling."""

    def __init__(self, dim: int = 32, out_dim: Optional[int] = None, depth: int = 1,
                 vocab_size: int = 97, max_len: int = 256):
        super().__init__()
        self.dim = dim
        self.out_dim = out_dim or dim
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.char_embed = nn.Embedding(vocab_size, dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, max_len, dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(SelfAttentionBlock(dim) for _ in range(depth))
        self.output_projection = nn.Linear(dim, self.out_dim)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def tokenize(self, text: str) -> torch.Tensor:
        # ord-mod hashing keeps the mapping stable across processes
        codes = [ord(c) % self.vocab_size for c in text[: self.max_len]]
        return torch.tensor(codes, dtype=torch.long)

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        # -> (len(texts), out_dim)
        embeddings = []
        for text in texts:
            if not text:
                raise EmptyPromptError("cannot encode an empty prompt")
            tokens = self.tokenize(text)
            x = self.char_embed(tokens).unsqueeze(0) + self.pos_embed[:, : tokens.shape[0]]
            for blk in self.blocks:
                x = blk(x)
            embeddings.append(x.mean(dim=1).squeeze(0))
        return self.output_projection(torch.stack(embeddings))


def encode_visual(encoder: nn.Module, flow_image: torch.Tensor) -> TokenGrid:
    """Single rendered flow image (3, S, S) -> TokenGrid of the encoder's (h, w, d)."""
    if flow_image.ndim != 3:
        raise ShapeMismatchError(f"expected a (3, S, S) image, got shape {tuple(flow_image.shape)}")
    tokens = encoder(flow_image.unsqueeze(0))[0]
    return TokenGrid(tokens)


def encode_prompts(
    encoder: nn.Module, spec: AUTaskSpec, emotion_texts: Sequence[str] = ()
) -> PromptEmbeddings:
    """One positive and one negative embedding per AU plus one per emotion text."""
    pos_texts = [p for p, _ in spec.prompts]
    neg_texts = [n for _, n in spec.prompts]
    if any(not t for t in pos_texts + neg_texts) or any(not t for t in emotion_texts):
        raise EmptyPromptError("prompts and emotion texts must be non-empty")
    all_texts = pos_texts + neg_texts + list(emotion_texts)
    embedded = encoder(all_texts)
    n = spec.n_aus
    return PromptEmbeddings(pos=embedded[:n], neg=embedded[n : 2 * n], emotion=embedded[2 * n :])


def set_trainable(encoder: nn.Module, last_k: int) -> nn.Module:
    """Freeze everything except the final `last_k` blocks (plus the output
    projection when at least one block is trainable); last_k=0 freezes all."""
    n_blocks = encoder.n_blocks
    if last_k < 0 or last_k > n_blocks:
        raise LayerCountExceededError(f"last_k={last_k} outside [0, {n_blocks}]")
    for p in encoder.parameters():
        p.requires_grad_(False)
    if last_k > 0:
        for blk in list(encoder.blocks)[n_blocks - last_k :]:
            for p in blk.parameters():
                p.requires_grad_(True)
        if getattr(encoder, "output_projection", None) is not None:
            for p in encoder.output_projection.parameters():
                p.requires_grad_(True)
    return encoder


# ---------------------------------------------------------------------------
# Pretrained adapter (optional; requires locally stored CLIP-style weights)
# ---------------------------------------------------------------------------

ADAPTER_GRID = (7, 7)
ADAPTER_VISUAL_DIM = 768
ADAPTER_TEXT_DIM = 512


class PretrainedVisualAdapter(nn.Module):
    """ViT-B/32-style vision tower exposing a (7, 7, 768) token grid.

    `weights_path` must point at a local checkpoint directory loadable by
    transformers' CLIPVisionModel; nothing is downloaded.
    """

    def __init__(self, weights_path: str, input_size: int = 224):
        super().__init__()
        try:
            from transformers import CLIPVisionModel
        except ImportError as exc:
            raise MicroAUError("pretrained-adapter needs the 'transformers' extra installed") from exc
        self.input_size = input_size
        self.model = CLIPVisionModel.from_pretrained(weights_path, local_files_only=True)
        self.dim = ADAPTER_VISUAL_DIM
        self.grid = input_size // 32
        # image channel statistics the backbone was trained with
        self.register_buffer("mean", torch.tensor([0.4815, 0.4578, 0.4082]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.2686, 0.2613, 0.2758]).view(1, 3, 1, 1))

    @property
    def blocks(self):
        return self.model.vision_model.encoder.layers

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != (self.input_size, self.input_size):
            raise ShapeMismatchError(
                f"expected {self.input_size}x{self.input_size} input, got {tuple(images.shape[-2:])}"
            )
        pixel_values = (images - self.mean) / self.std
        hidden = self.model(pixel_values=pixel_values).last_hidden_state  # (B, 1+hw, 768)
        tokens = hidden[:, 1:, :]
        b = tokens.shape[0]
        return tokens.reshape(b, self.grid, self.grid, self.dim)


class PretrainedTextAdapter(nn.Module):
    """CLIP text tower producing 512-d prompt embeddings from local weights."""

    def __init__(self, weights_path: str):
        super().__init__()
        try:
            from transformers import CLIPTextModelWithProjection, CLIPTokenizerFast
        except ImportError as exc:
            raise MicroAUError("pretrained-adapter needs the 'transformers' extra installed") from exc
        self.tokenizer = CLIPTokenizerFast.from_pretrained(weights_path, local_files_only=True)
        self.model = CLIPTextModelWithProjection.from_pretrained(weights_path, local_files_only=True)
        self.out_dim = ADAPTER_TEXT_DIM

    @property
    def blocks(self):
        return self.model.text_model.encoder.layers

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def output_projection(self) -> nn.Module:
        return self.model.text_projection

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        if any(not t for t in texts):
            raise EmptyPromptError("cannot encode an empty prompt")
        batch = self.tokenizer(list(texts), padding=True, return_tensors="pt")
        return self.model(**batch).text_embeds


def build_encoders(config) -> tuple[nn.Module, nn.Module]:
    """Instantiate the visual/text encoder pair selected by the config."""
    if config.encoder_kind == "toy":
        visual = ToyVisualEncoder(
            input_size=config.input_size,
            patch_size=config.toy_patch_size,
            dim=config.toy_dim,
            depth=config.toy_depth,
        )
        text = ToyTextEncoder(dim=config.toy_dim, out_dim=config.toy_dim, depth=config.toy_depth)
        return visual, text
    if config.encoder_kind == "pretrained-adapter":
        if not config.pretrained_path:
            raise MicroAUError("encoder_kind=pretrained-adapter requires pretrained_path")
        return (
            PretrainedVisualAdapter(config.pretrained_path, input_size=config.input_size),
            PretrainedTextAdapter(config.pretrained_path),
        )
    raise MicroAUError(f"unknown encoder_kind {config.encoder_kind!r}")
