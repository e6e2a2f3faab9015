"""File-based visualization outputs: per-AU attention heatmaps over the apex
frame and batch similarity matrices. Raw matrices are always written next to
the rendered image so downstream checks read numbers, not pixels.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import cv2
import matplotlib.pyplot as plt
import numpy as np
import torch

from .core import MicroAUError
from .losses import similarity_matrix
from .lsi import pta_weights
from .model import AUDetector
from .train import PreparedSample, collate


class UnknownSampleError(MicroAUError):
    pass


def _au_heat(model: AUDetector, prepared: PreparedSample) -> np.ndarray:
    """(N, h, w) maps of fusion weights at each AU's landmark cells."""
    images, indices, _ = collate([prepared])
    grid_h, grid_w = model.visual_encoder.grid, model.visual_encoder.grid
    with torch.no_grad():
        tokens = model.visual_encoder(images)
        flat = tokens.reshape(1, grid_h * grid_w, -1)
        heat = np.zeros((model.task_spec.n_aus, grid_h, grid_w), dtype=np.float64)
        for n, cells in enumerate(indices):
            group = flat[0, cells[0]]
            if model.config.pooling == "pta":
                weights = pta_weights(model.local_fusion.scorer_for(n), group).numpy()
            else:
                # pooling baselines have no learned weights; show the cells uniformly
                weights = np.full(len(cells[0]), 1.0 / len(cells[0]))
            for cell, weight in zip(cells[0].numpy(), weights):
                heat[n, cell // grid_w, cell % grid_w] += float(weight)
    return heat


def render_heatmap(model: AUDetector, prepared: PreparedSample, out_dir: str, stem: str) -> list[str]:
    """One panel per AU: apex frame with the AU's cell weights overlaid.
    Writes <stem>.png plus <stem>_au<id>.txt with each raw heat matrix."""
    heat = _au_heat(model, prepared)
    if prepared.apex_path is not None:
        apex = cv2.imread(prepared.apex_path, cv2.IMREAD_GRAYSCALE)
    else:
        apex = (prepared.image[2].numpy() * 255).astype(np.uint8)  # magnitude channel stand-in
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    n_aus = model.task_spec.n_aus
    fig, axes = plt.subplots(1, n_aus, figsize=(4 * n_aus, 4), squeeze=False)
    for n, au in enumerate(model.task_spec.au_ids):
        upsampled = cv2.resize(
            heat[n], (apex.shape[1], apex.shape[0]), interpolation=cv2.INTER_NEAREST
        )
        ax = axes[0][n]
        ax.imshow(apex, cmap="gray")
        ax.imshow(upsampled, cmap="jet", alpha=0.45, vmin=0.0)
        ax.set_title(f"AU{au}")
        ax.axis("off")
        txt_path = out / f"{stem}_au{au}.txt"
        np.savetxt(txt_path, heat[n], fmt="%.8f")
        written.append(str(txt_path))
    png_path = out / f"{stem}.png"
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    written.insert(0, str(png_path))
    return written


def render_simmatrix(
    model: AUDetector,
    batch: Sequence[PreparedSample],
    au_index: int,
    out_dir: str,
    stem: str,
) -> list[str]:
    """Visual-vs-text cosine matrix for one AU over a chosen batch.
    Writes <stem>.png and the raw matrix as <stem>.txt."""
    images, indices, labels = collate(batch)
    with torch.no_grad():
        output = model(images, indices)
        prompts = model.encode_prompts()
        pos = prompts.pos / prompts.pos.norm(dim=-1, keepdim=True)
        neg = prompts.neg / prompts.neg.norm(dim=-1, keepdim=True)
        text = torch.where(
            labels[:, au_index].to(torch.bool).unsqueeze(-1), pos[au_index], neg[au_index]
        )
        matrix = similarity_matrix(output.au_visual[:, au_index, :], text).numpy()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt_path = out / f"{stem}.txt"
    np.savetxt(txt_path, matrix, fmt="%.8f")
    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(matrix, cmap="viridis", vmin=-1.0, vmax=1.0)
    au = model.task_spec.au_ids[au_index]
    ax.set_title(f"AU{au} visual-text similarity")
    ax.set_xlabel("text (by sample label)")
    ax.set_ylabel("visual (by sample)")
    fig.colorbar(image, ax=ax)
    png_path = out / f"{stem}.png"
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return [str(png_path), str(txt_path)]
