"""Emotion-label-free micro-expression recognition.

Per-AU visual features are compared against emotion label-text embeddings;
similarities are summed over (optionally filtered) AUs and the highest-scoring
emotion wins. No emotion-labeled training is involved anywhere.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import torch

from .core import AUTaskSpec, ConfigError, MicroAUError, parse_kv


class EmptyContributionError(MicroAUError):
    pass


DEFAULT_EMOTIONS = ("positive", "negative", "surprise")

# Shipped label texts are placeholders: the wording is not standardized and
# should be treated as a tunable asset.
DEFAULT_LABEL_TEXTS = {
    "positive": "The face shows a positive emotion",
    "negative": "The face shows a negative emotion",
    "surprise": "The face shows surprise",
}


@dataclasses.dataclass(frozen=True)
class EmotionSpec:
    """Emotion categories, their label texts, and optional AU restrictions.

    compose[r], when present, builds emotion r's embedding from AU prompt
    embeddings instead of encoding label_texts[r]: a list of (au_id, 'pos'|'neg')
    whose embeddings are summed and renormalized.
    au_filter[r], when present, limits which AUs contribute to emotion r's score.
    """

    emotions: tuple[str, ...] = DEFAULT_EMOTIONS
    label_texts: tuple[str, ...] = tuple(DEFAULT_LABEL_TEXTS[e] for e in DEFAULT_EMOTIONS)
    compose: tuple[Optional[tuple[tuple[int, str], ...]], ...] = (None, None, None)
    au_filter: tuple[Optional[tuple[int, ...]], ...] = (None, None, None)

    def __post_init__(self):
        if len(self.emotions) < 2:
            raise ConfigError("need at least 2 emotion categories")
        if len(set(self.emotions)) != len(self.emotions):
            raise ConfigError("emotion names must be distinct")
        if len(self.label_texts) != len(self.emotions):
            raise ConfigError("one label text per emotion required")
        if any(not t for t in self.label_texts):
            raise ConfigError("label texts must be non-empty")
        if len(set(self.label_texts)) != len(self.label_texts):
            raise ConfigError("label texts must be distinct")
        for name, attr in (("compose", self.compose), ("au_filter", self.au_filter)):
            if len(attr) != len(self.emotions):
                raise ConfigError(f"{name} must have one entry per emotion")

    @property
    def n_emotions(self) -> int:
        return len(self.emotions)

    def index_of(self, emotion: str) -> int:
        return self.emotions.index(emotion)


def emotion_spec_from_kv(kv: dict[str, str]) -> EmotionSpec:
    if "emotions" not in kv:
        raise ConfigError("emotion spec file must list emotions")
    emotions = tuple(e.strip() for e in kv["emotions"].split(",") if e.strip())
    texts, compose, au_filter = [], [], []
    known = {"emotions"}
    for emo in emotions:
        text_key, comp_key, aus_key = f"text.{emo}", f"compose.{emo}", f"aus.{emo}"
        known.update((text_key, comp_key, aus_key))
        texts.append(kv.get(text_key, DEFAULT_LABEL_TEXTS.get(emo, f"The face shows {emo}")))
        if comp_key in kv:
            parts = []
            for piece in kv[comp_key].split(","):
                au_str, _, polarity = piece.strip().partition(":")
                if polarity not in ("pos", "neg"):
                    raise ConfigError(f"{comp_key}: expected 'AU:pos' or 'AU:neg', got {piece!r}")
                parts.append((int(au_str), polarity))
            compose.append(tuple(parts))
        else:
            compose.append(None)
        if aus_key in kv:
            au_filter.append(tuple(int(a) for a in kv[aus_key].replace(",", " ").split()))
        else:
            au_filter.append(None)
    unknown = [k for k in kv if k not in known]
    if unknown:
        raise ConfigError(f"unknown emotion spec keys: {unknown}")
    return EmotionSpec(
        emotions=emotions,
        label_texts=tuple(texts),
        compose=tuple(compose),
        au_filter=tuple(au_filter),
    )


def load_emotion_spec(path: str) -> EmotionSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return emotion_spec_from_kv(parse_kv(fh.read()))


def emotion_spec_text(spec: EmotionSpec) -> str:
    lines = [f"emotions = {','.join(spec.emotions)}"]
    for i, emo in enumerate(spec.emotions):
        lines.append(f"text.{emo} = {spec.label_texts[i]}")
        if spec.compose[i] is not None:
            lines.append(
                f"compose.{emo} = " + ",".join(f"{au}:{pol}" for au, pol in spec.compose[i])
            )
        if spec.au_filter[i] is not None:
            lines.append(f"aus.{emo} = " + ",".join(str(a) for a in spec.au_filter[i]))
    return "\n".join(lines) + "\n"


def filter_matrix(spec: EmotionSpec, task_spec: AUTaskSpec) -> Optional[torch.Tensor]:
    """(R, N) boolean contribution mask, or None when no emotion sets a filter."""
    if all(f is None for f in spec.au_filter):
        return None
    mask = torch.zeros(spec.n_emotions, task_spec.n_aus, dtype=torch.bool)
    for r, allowed in enumerate(spec.au_filter):
        if allowed is None:
            mask[r] = True
        else:
            for au in allowed:
                if au not in task_spec.au_ids:
                    raise ConfigError(f"emotion filter references AU{au} outside the task spec")
                mask[r, task_spec.index_of(au)] = True
    return mask


def label_text_embeddings(
    spec: EmotionSpec, task_spec: AUTaskSpec, prompt_pos: torch.Tensor,
    prompt_neg: torch.Tensor, encoded_texts: torch.Tensor
) -> torch.Tensor:
    """(R, d_t) unit-norm emotion embeddings: composed from AU prompt
    embeddings where requested, otherwise the encoded label texts."""
    rows = []
    for r in range(spec.n_emotions):
        recipe = spec.compose[r]
        if recipe is None:
            vec = encoded_texts[r]
        else:
            vec = None
            for au, polarity in recipe:
                if au not in task_spec.au_ids:
                    raise ConfigError(f"compose recipe references AU{au} outside the task spec")
                source = prompt_pos if polarity == "pos" else prompt_neg
                part = source[task_spec.index_of(au)]
                vec = part if vec is None else vec + part
        norm = vec.norm()
        if norm == 0:
            raise MicroAUError(f"emotion {spec.emotions[r]!r} embedding has zero norm")
        rows.append(vec / norm)
    return torch.stack(rows)


def emotion_scores(
    au_visual: torch.Tensor,
    label_embeddings: torch.Tensor,
    au_filter: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Summed per-AU cosine similarities against each emotion embedding.

    au_visual: (N, d_t) unit rows; label_embeddings: (R, d_t) unit rows;
    au_filter: optional (R, N) boolean mask of contributing AUs.
    """
    sims = label_embeddings @ au_visual.transpose(-2, -1)  # (R, N)
    if au_filter is None:
        return sims.sum(dim=-1)
    if au_filter.shape != sims.shape:
        raise MicroAUError(f"filter shape {tuple(au_filter.shape)} vs (R, N)={tuple(sims.shape)}")
    if torch.any(au_filter.sum(dim=-1) == 0):
        raise EmptyContributionError("a filter row removes every AU for some emotion")
    return (sims * au_filter.to(sims.dtype)).sum(dim=-1)


def classify_emotion(scores) -> int:
    """Argmax category index; ties break toward the lowest index."""
    scores = np.asarray(
        scores.detach().numpy() if isinstance(scores, torch.Tensor) else scores, dtype=np.float64
    )
    if not np.all(np.isfinite(scores)):
        raise MicroAUError("emotion scores must be finite")
    return int(np.argmax(scores))


def macro_f1(confusion: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class F1 and their unweighted mean from an (R, R) true-by-predicted
    confusion matrix. A class with zero denominator contributes F1 = 0."""
    confusion = np.asarray(confusion, dtype=np.int64)
    r = confusion.shape[0]
    f1 = np.zeros(r)
    for i in range(r):
        tp = confusion[i, i]
        fn = confusion[i].sum() - tp
        fp = confusion[:, i].sum() - tp
        denom = 2 * tp + fp + fn
        f1[i] = (2 * tp / denom) if denom > 0 else 0.0
    return f1, float(f1.mean())
